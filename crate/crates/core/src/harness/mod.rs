//! Desk-scale training experiments comparing the quantization regimes.

mod analysis;
mod config;
mod data;
mod layer;
mod mlp;
mod run;
mod transformer;

pub use analysis::{analyze_tensor, ComponentHistogram, TensorAnalysis, COMPONENT_INDICES};
pub use config::{Ablation, ExperimentConfig, ModelSpec, Regime};
pub use data::{stream_rng, RegressionBatch, RegressionTask, TokenBatch, TokenSource};
pub use layer::{derive_seed, Linear, LinearCache, LinearGrads};
pub use mlp::Mlp;
pub use run::{
    compare_regimes, rank_sweep, relative_spread, run_experiment, LayerSummary, RankSweep,
    RegimeComparison, RunReport,
};
pub use transformer::{Block, RmsNorm, TinyTransformer};
