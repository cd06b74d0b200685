//! Spectral-domain low-bit quantization.
//!
//! The crate emulates NVFP4 block quantization in software, splits matrices
//! into a high-precision-diagonal low-rank branch plus a residual, and runs
//! fully quantized forward/backward GeMMs on the split operands. Baseline
//! recipes (direct NVFP4, randomized Hadamard) and a small training harness
//! compare the regimes.

pub mod baselines;
pub mod engine;
pub mod error;
pub mod fp4;
pub mod harness;
pub mod io;
pub mod matrix;
pub mod precision;
pub mod spectral;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrix::{gemm, gemm_op, Accumulation, DenseMatrix, Op};
pub use precision::{cast_matrix, round_to_format, EmulatedFormat, RoundingMode};
