use serde::{Deserialize, Serialize};

use crate::engine::OptimizerKind;
use crate::error::{Error, Result};
use crate::precision::{EmulatedFormat, RoundingMode};
use crate::spectral::SketchPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Two-layer tanh MLP regressing a planted teacher.
    Mlp {
        input: usize,
        hidden: usize,
        output: usize,
        seq_len: usize,
        batch: usize,
    },
    /// Pre-norm causal transformer language model.
    TinyTransformer {
        layers: usize,
        hidden: usize,
        ffn: usize,
        heads: usize,
        seq_len: usize,
        batch: usize,
        vocab: usize,
        /// Byte-level text file; a planted Markov source is used when absent.
        #[serde(default)]
        corpus: Option<std::path::PathBuf>,
    },
}

impl ModelSpec {
    /// Default MLP benchmark dimensions.
    pub fn standard_mlp() -> Self {
        ModelSpec::Mlp {
            input: 64,
            hidden: 64,
            output: 16,
            seq_len: 16,
            batch: 16,
        }
    }

    pub fn tiny_transformer() -> Self {
        ModelSpec::TinyTransformer {
            layers: 2,
            hidden: 128,
            ffn: 512,
            heads: 4,
            seq_len: 64,
            batch: 8,
            vocab: 64,
            corpus: None,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            ModelSpec::Mlp { seq_len, .. } | ModelSpec::TinyTransformer { seq_len, .. } => *seq_len,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            ModelSpec::Mlp { batch, .. } | ModelSpec::TinyTransformer { batch, .. } => *batch,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            ModelSpec::Mlp {
                input,
                hidden,
                output,
                seq_len,
                batch,
            } => {
                positive("input", *input)?;
                positive("hidden", *hidden)?;
                positive("output", *output)?;
                positive("seq_len", *seq_len)?;
                positive("batch", *batch)
            }
            ModelSpec::TinyTransformer {
                layers,
                hidden,
                ffn,
                heads,
                seq_len,
                batch,
                vocab,
                ..
            } => {
                positive("layers", *layers)?;
                positive("hidden", *hidden)?;
                positive("ffn", *ffn)?;
                positive("heads", *heads)?;
                positive("seq_len", *seq_len)?;
                positive("batch", *batch)?;
                positive("vocab", *vocab)?;
                if hidden % heads != 0 {
                    return Err(Error::Config(format!(
                        "hidden {hidden} is not divisible by {heads} heads"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Unquantized reference.
    Bf16,
    Fp4Direct,
    Fp4Hadamard,
    Fp4Metis,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Bf16, Regime::Fp4Direct, Regime::Fp4Hadamard, Regime::Fp4Metis];

    pub fn label(self) -> &'static str {
        match self {
            Regime::Bf16 => "bf16",
            Regime::Fp4Direct => "fp4_direct",
            Regime::Fp4Hadamard => "fp4_hadamard",
            Regime::Fp4Metis => "fp4_metis",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

/// Which parts of the decomposition are active under [`Regime::Fp4Metis`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub decompose_weights: bool,
    pub decompose_activations: bool,
    pub decompose_gradients: bool,
    pub sparse_sampling: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            decompose_weights: true,
            decompose_activations: true,
            decompose_gradients: true,
            sparse_sampling: true,
        }
    }
}

impl Ablation {
    pub fn none() -> Self {
        Self {
            decompose_weights: false,
            decompose_activations: false,
            decompose_gradients: false,
            sparse_sampling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub regime: Regime,
    /// Rank of every split as a fraction of the layer's smaller dimension.
    #[serde(default = "default_rank_fraction")]
    pub rank_fraction: f64,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    #[serde(default = "default_sample_ratio")]
    pub sample_ratio: f64,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_rounding")]
    pub rounding: RoundingMode,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Precision of the master weights kept by the optimizer.
    #[serde(default = "default_master")]
    pub master: EmulatedFormat,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Held-out sequences used for the final evaluation.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn default_rank_fraction() -> f64 {
    SketchPlan::DEFAULT_RANK_FRACTION
}
fn default_oversample() -> usize {
    SketchPlan::DEFAULT_OVERSAMPLE
}
fn default_sample_ratio() -> f64 {
    SketchPlan::DEFAULT_SAMPLE_RATIO
}
fn default_power_iters() -> usize {
    SketchPlan::DEFAULT_POWER_ITERS
}
fn default_rounding() -> RoundingMode {
    RoundingMode::StochasticRound
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::adam()
}
fn default_master() -> EmulatedFormat {
    EmulatedFormat::Bf16
}
fn default_eval_batches() -> usize {
    4
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, regime: Regime, steps: usize, lr: f64, seed: u64) -> Self {
        Self {
            model,
            regime,
            rank_fraction: default_rank_fraction(),
            oversample: default_oversample(),
            sample_ratio: default_sample_ratio(),
            power_iters: default_power_iters(),
            ablation: Ablation::default(),
            rounding: default_rounding(),
            optimizer: default_optimizer(),
            master: default_master(),
            steps,
            lr,
            seed,
            eval_batches: default_eval_batches(),
        }
    }

    /// Standard desk-scale benchmark: the default MLP for 2000 steps.
    pub fn standard(regime: Regime, seed: u64) -> Self {
        Self::new(ModelSpec::standard_mlp(), regime, 2000, 2e-3, seed)
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_rank_fraction(mut self, fraction: f64) -> Self {
        self.rank_fraction = fraction;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..=0.5).contains(&self.rank_fraction) {
            return Err(Error::Config(format!(
                "rank fraction {} outside [0, 0.5]",
                self.rank_fraction
            )));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "sample ratio {} outside (0, 1]",
                self.sample_ratio
            )));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("eval_batches must be positive".into()));
        }
        Ok(())
    }

    /// Split rank for an `rows x cols` weight.
    pub fn rank_for(&self, rows: usize, cols: usize) -> usize {
        if self.regime != Regime::Fp4Metis {
            return 0;
        }
        SketchPlan::rank_for(rows, cols, self.rank_fraction).min(rows.min(cols))
    }
}
