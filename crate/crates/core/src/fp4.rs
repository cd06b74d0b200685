//! NVFP4 block quantizer: E2M1 elements sharing one E4M3 scale per block of
//! `t` contiguous entries along the last axis.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::precision::{
    e2m1_decode, e2m1_encode, round_finite, unit_uniform, EmulatedFormat, RoundingMode, E2M1_MAX,
};

pub const DEFAULT_BLOCK_SIZE: usize = 16;

/// Identifies an independent stochastic-rounding stream. Each block seeks to
/// its own offset inside the stream, so results do not depend on the order
/// in which blocks are processed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockAxis {
    LastAxisContiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlockTensor {
    rows: usize,
    cols: usize,
    block_size: usize,
    mode: RoundingMode,
    axis: BlockAxis,
    /// One E2M1 code (sign bit 3, magnitude index bits 0..3) per element.
    codes: Vec<u8>,
    /// One E4M3 scale per block, row-major over (row, block).
    scales: Vec<f64>,
}

impl QuantizedBlockTensor {
    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        block_size: usize,
        mode: RoundingMode,
        codes: Vec<u8>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be >= 1".into()));
        }
        if codes.len() != rows * cols || scales.len() != rows * cols.div_ceil(block_size) {
            return Err(Error::Format("quantized tensor parts disagree with shape".into()));
        }
        if let Some(s) = scales
            .iter()
            .find(|&&s| !(s > 0.0) || !EmulatedFormat::Fp8E4M3.is_representable(s))
        {
            return Err(Error::Format(format!("invalid block scale {s}")));
        }
        Ok(Self {
            rows,
            cols,
            block_size,
            mode,
            axis: BlockAxis::LastAxisContiguous,
            codes,
            scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn block_size(&self) -> usize {
        self.block_size
    }
    pub fn mode(&self) -> RoundingMode {
        self.mode
    }
    pub fn axis(&self) -> BlockAxis {
        self.axis
    }
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
    pub fn blocks_per_row(&self) -> usize {
        self.cols.div_ceil(self.block_size)
    }

    /// E2M1 value of element (i, j) before scaling.
    pub fn code_value(&self, i: usize, j: usize) -> f64 {
        e2m1_decode(self.codes[i * self.cols + j])
    }

    pub fn scale_of(&self, i: usize, j: usize) -> f64 {
        self.scales[i * self.blocks_per_row() + j / self.block_size]
    }
}

/// Block scale: block max over the E2M1 max, rounded up onto E4M3 so the
/// block max never exceeds the code range. All-zero blocks use scale 1.
pub fn block_scale(max_abs: f64) -> f64 {
    if max_abs == 0.0 {
        return 1.0;
    }
    round_finite(
        max_abs / E2M1_MAX,
        EmulatedFormat::Fp8E4M3,
        RoundingMode::RoundUpMagnitude,
        0.0,
    )
}

/// Quantize `m` to NVFP4 with blocks of `block_size` along each row.
///
/// `stream` is only consulted for stochastic rounding.
pub fn quantize_nvfp4(
    m: &DenseMatrix,
    block_size: usize,
    mode: RoundingMode,
    stream: RngStream,
) -> Result<QuantizedBlockTensor> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be >= 1".into()));
    }
    m.ensure_finite("quantize_nvfp4")?;
    let (rows, cols) = m.shape();
    let blocks_per_row = cols.div_ceil(block_size);
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * blocks_per_row);
    let mut rng = match mode {
        RoundingMode::StochasticRound => {
            let mut r = ChaCha8Rng::seed_from_u64(stream.seed);
            r.set_stream(stream.stream);
            Some(r)
        }
        _ => None,
    };
    for i in 0..rows {
        let row = m.row(i);
        for (b, block) in row.chunks(block_size).enumerate() {
            let max_abs = block.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let scale = block_scale(max_abs);
            scales.push(scale);
            if let Some(r) = rng.as_mut() {
                // two 32-bit words per u64 draw
                let block_index = (i * blocks_per_row + b) as u128;
                r.set_word_pos(block_index * block_size as u128 * 2);
            }
            for &v in block {
                let uniform = match rng.as_mut() {
                    Some(r) => unit_uniform(r.next_u64()),
                    None => 0.0,
                };
                let q = round_finite(v / scale, EmulatedFormat::Fp4E2M1, mode, uniform);
                codes.push(e2m1_encode(q)?);
            }
        }
    }
    Ok(QuantizedBlockTensor {
        rows,
        cols,
        block_size,
        mode,
        axis: BlockAxis::LastAxisContiguous,
        codes,
        scales,
    })
}

pub fn dequantize(q: &QuantizedBlockTensor) -> DenseMatrix {
    let bpr = q.blocks_per_row();
    let mut data = Vec::with_capacity(q.rows * q.cols);
    for i in 0..q.rows {
        for j in 0..q.cols {
            let scale = q.scales[i * bpr + j / q.block_size];
            data.push(e2m1_decode(q.codes[i * q.cols + j]) * scale);
        }
    }
    DenseMatrix::from_vec(q.rows, q.cols, data).expect("shape preserved")
}

/// Fraction of the nonzero entries of `m` that dequantize to exactly zero.
/// Zero when `m` has no nonzero entries.
pub fn zero_fraction(m: &DenseMatrix, q: &QuantizedBlockTensor) -> Result<f64> {
    if m.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "matrix {:?} vs quantized {:?}",
            m.shape(),
            q.shape()
        )));
    }
    let mut nonzero = 0usize;
    let mut flushed = 0usize;
    for (idx, &v) in m.data().iter().enumerate() {
        if v != 0.0 {
            nonzero += 1;
            if q.codes[idx] & 0x7 == 0 {
                flushed += 1;
            }
        }
    }
    Ok(if nonzero == 0 {
        0.0
    } else {
        flushed as f64 / nonzero as f64
    })
}

/// Quantize then dequantize in one step.
pub fn fake_quantize(
    m: &DenseMatrix,
    block_size: usize,
    mode: RoundingMode,
    stream: RngStream,
) -> Result<DenseMatrix> {
    Ok(dequantize(&quantize_nvfp4(m, block_size, mode, stream)?))
}
