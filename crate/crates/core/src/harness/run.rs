use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{op_counter, GemmShape, Optimizer};
use crate::error::{Error, Result};
use crate::io::{visit_slice, Report, Series};
use crate::matrix::DenseMatrix;
use crate::spectral::{elbow_fraction, sample_sequences, sampled_subspace, svd_full, Elbow};

use super::config::{ExperimentConfig, ModelSpec, Regime};
use super::data::{stream_rng, RegressionTask, TokenSource};
use super::layer::{add_bias, Linear};
use super::mlp::Mlp;
use super::transformer::TinyTransformer;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
/// Quantization-noise step index reserved for evaluation passes.
const EVAL_STEP: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    /// Rank of the trained low-rank branch.
    pub weight_rank: usize,
    /// Elbow of the effective weight's spectrum.
    pub weight_elbow: Option<Elbow>,
    /// Elbow of the residual branch's spectrum (decomposed regime only).
    pub residual_elbow: Option<Elbow>,
    /// Relative Frobenius error of the layer output against the wide product,
    /// on an evaluation batch.
    pub output_error: f64,
    /// Alignment of the sampled input subspace with the exact one.
    pub input_alignment: Option<f64>,
    /// Decomposition multiply overhead relative to the plain GeMMs.
    pub overhead_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// Pre-update training loss of every completed step.
    pub train_loss: Vec<f64>,
    /// Mean of the last 5% of the training losses.
    pub final_train_loss: f64,
    /// Held-out loss after training; absent on divergence.
    pub final_eval_loss: Option<f64>,
    pub diverged_at: Option<usize>,
    pub layers: Vec<LayerSummary>,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Held-out loss, falling back to the final training loss.
    pub fn final_loss(&self) -> f64 {
        self.final_eval_loss.unwrap_or(self.final_train_loss)
    }
}

impl Report for RunReport {
    fn kind(&self) -> &'static str {
        "run"
    }

    fn visit_floats(&self, f: &mut dyn FnMut(&str, f64)) {
        f("config.lr", self.config.lr);
        f("config.rank_fraction", self.config.rank_fraction);
        f("config.sample_ratio", self.config.sample_ratio);
        visit_slice(f, "train_loss", &self.train_loss);
        f("final_train_loss", self.final_train_loss);
        if let Some(v) = self.final_eval_loss {
            f("final_eval_loss", v);
        }
        for l in &self.layers {
            let p = format!("layers.{}", l.name);
            f(&format!("{p}.output_error"), l.output_error);
            f(&format!("{p}.overhead_ratio"), l.overhead_ratio);
            if let Some(a) = l.input_alignment {
                f(&format!("{p}.input_alignment"), a);
            }
            for (tag, e) in [("weight_elbow", &l.weight_elbow), ("residual_elbow", &l.residual_elbow)] {
                if let Some(e) = e {
                    f(&format!("{p}.{tag}.max_curvature"), e.max_curvature);
                }
            }
        }
        f("wall_time_secs", self.wall_time_secs);
    }

    fn series(&self) -> Option<Series> {
        Some(
            Series::new()
                .with("step", (0..self.train_loss.len()).map(|i| i as f64).collect())
                .with("train_loss", self.train_loss.clone()),
        )
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. }
    )
}

fn spectrum_elbow(m: &DenseMatrix) -> Result<Option<Elbow>> {
    let svd = svd_full(m)?;
    let top = svd.values.first().copied().unwrap_or(0.0);
    let nonzero: Vec<f64> = svd.values.into_iter().filter(|&s| s > top * 1e-12 && s > 0.0).collect();
    if nonzero.len() < 3 {
        return Ok(None);
    }
    Ok(Some(elbow_fraction(&nonzero)?))
}

fn summarize(layer: &Linear, input: &DenseMatrix, cfg: &ExperimentConfig) -> Result<LayerSummary> {
    let (m, n) = layer.shape();
    let (y, _) = layer.forward(input, EVAL_STEP)?;
    let exact = add_bias(input.matmul(&layer.weight.effective())?, &layer.bias);
    let output_error = y.relative_error(&exact)?;
    let metis = cfg.regime == Regime::Fp4Metis;
    let residual_elbow = if metis { spectrum_elbow(&layer.weight.residual)? } else { None };
    let plan = layer.plan().filter(|p| metis && p.sketch.rank > 0);
    let input_alignment = match plan {
        Some(p) if p.activations && input.rows() > p.sketch.rank => {
            let sketch = crate::spectral::SketchPlan { seed: cfg.seed, ..p.sketch };
            let sampled = sampled_subspace(input, &sketch, p.seq_len)?;
            let exact = svd_full(input)?.right.columns(0..sampled.cols());
            Some(crate::spectral::subspace_alignment(&sampled, &exact)?)
        }
        _ => None,
    };
    let overhead_ratio = match plan {
        Some(p) => {
            let l = input.rows();
            let sampled_rows = if p.sparse_sampling {
                sample_sequences(l, p.seq_len, &p.sketch)?.len() * p.seq_len
            } else {
                l
            };
            op_counter(GemmShape { l, m, n }, p.sketch.rank, sampled_rows.min(l)).overhead_ratio
        }
        None => 0.0,
    };
    Ok(LayerSummary {
        name: layer.name.clone(),
        inputs: m,
        outputs: n,
        weight_rank: layer.weight.rank(),
        weight_elbow: spectrum_elbow(&layer.weight.effective())?,
        residual_elbow,
        output_error,
        input_alignment,
        overhead_ratio,
    })
}

/// Result of the training loop before per-layer summaries.
struct Trained {
    losses: Vec<f64>,
    diverged_at: Option<usize>,
}

fn train_loop(steps: usize, mut step_fn: impl FnMut(u64) -> Result<f64>) -> Result<Trained> {
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        match step_fn(step as u64) {
            Ok(loss) if loss.is_finite() => losses.push(loss),
            Ok(_) => {
                return Ok(Trained {
                    losses,
                    diverged_at: Some(step),
                })
            }
            Err(e) if is_divergence(&e) => {
                log::warn!("diverged at step {step}: {e}");
                return Ok(Trained {
                    losses,
                    diverged_at: Some(step),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Trained {
        losses,
        diverged_at: None,
    })
}

fn tail_mean(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    let n = (losses.len() / 20).max(1);
    losses[losses.len() - n..].iter().sum::<f64>() / n as f64
}

fn optimizer(cfg: &ExperimentConfig) -> Optimizer {
    Optimizer::new(cfg.optimizer).with_master(cfg.master)
}

/// Trains the configured model under its regime and reports the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut opt = optimizer(cfg);
    let (trained, eval_loss, layers) = match &cfg.model {
        ModelSpec::Mlp {
            input,
            hidden,
            output,
            seq_len,
            batch,
        } => {
            let task = RegressionTask::planted(*input, *output, *seq_len, cfg.seed);
            let mut model = Mlp::new(*input, *hidden, *output, cfg)?;
            let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
            let trained = train_loop(cfg.steps, |step| {
                let b = task.sample(*batch, &mut rng);
                model.train_step(&b, step, &mut opt, cfg.lr)
            })?;
            let eval = task.sample(batch * cfg.eval_batches, &mut stream_rng(cfg.seed, EVAL_STREAM));
            let (eval_loss, layers) = if trained.diverged_at.is_some() {
                (None, Vec::new())
            } else {
                let h = model.hidden.forward(&eval.inputs, EVAL_STEP)?.0.map(f64::tanh);
                let layers = vec![
                    summarize(&model.hidden, &eval.inputs, cfg)?,
                    summarize(&model.out, &h, cfg)?,
                ];
                (Some(model.loss(&eval, EVAL_STEP)?), layers)
            };
            (trained, eval_loss, layers)
        }
        ModelSpec::TinyTransformer {
            layers,
            hidden,
            ffn,
            heads,
            seq_len,
            batch,
            vocab,
            corpus,
        } => {
            let source = match corpus {
                Some(path) => {
                    let bytes = std::fs::read(path)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    TokenSource::text(bytes, *seq_len)?
                }
                None => TokenSource::markov(*vocab, cfg.seed),
            };
            let vocab = source.vocab();
            let mut model = TinyTransformer::new(*layers, *hidden, *ffn, *heads, *seq_len, vocab, cfg)?;
            let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
            let trained = train_loop(cfg.steps, |step| {
                let b = source.sample(*batch, *seq_len, &mut rng);
                model.train_step(&b, step, &mut opt, cfg.lr)
            })?;
            let eval = source.sample(batch * cfg.eval_batches, *seq_len, &mut stream_rng(cfg.seed, EVAL_STREAM));
            let (eval_loss, summaries) = if trained.diverged_at.is_some() {
                (None, Vec::new())
            } else {
                let inputs = model.layer_inputs(&eval, EVAL_STEP)?;
                let summaries = model
                    .linears()
                    .into_iter()
                    .zip(&inputs)
                    .map(|(l, x)| summarize(l, x, cfg))
                    .collect::<Result<Vec<_>>>()?;
                (Some(model.loss(&eval, EVAL_STEP)?), summaries)
            };
            (trained, eval_loss, summaries)
        }
    };
    Ok(RunReport {
        config: cfg.clone(),
        final_train_loss: tail_mean(&trained.losses),
        train_loss: trained.losses,
        final_eval_loss: eval_loss,
        diverged_at: trained.diverged_at,
        layers,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweep {
    pub rank_fractions: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub runs: Vec<RunReport>,
    /// Largest relative deviation between final losses, over ranks of at
    /// least the default fraction.
    pub spread: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

impl Report for RankSweep {
    fn kind(&self) -> &'static str {
        "rank_sweep"
    }

    fn visit_floats(&self, f: &mut dyn FnMut(&str, f64)) {
        visit_slice(f, "rank_fractions", &self.rank_fractions);
        visit_slice(f, "final_losses", &self.final_losses);
        f("spread", self.spread);
        f("tolerance", self.tolerance);
        for (i, r) in self.runs.iter().enumerate() {
            r.visit_floats(&mut |name, v| f(&format!("runs[{i}].{name}"), v));
        }
    }

    fn series(&self) -> Option<Series> {
        Some(
            Series::new()
                .with("rank_fraction", self.rank_fractions.clone())
                .with("final_loss", self.final_losses.clone()),
        )
    }
}

/// Relative spread `(max − min) / min` of positive losses.
pub fn relative_spread(losses: &[f64]) -> f64 {
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if losses.len() < 2 || lo <= 0.0 {
        return 0.0;
    }
    (hi - lo) / lo
}

/// Runs the decomposed regime at each rank fraction.
pub fn rank_sweep(cfg: &ExperimentConfig, fractions: &[f64], tolerance: f64) -> Result<RankSweep> {
    if fractions.is_empty() {
        return Err(Error::Config("rank sweep needs at least one rank".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 0.5)) {
        return Err(Error::Config(format!("rank fraction {f} outside (0, 0.5]")));
    }
    let runs = fractions
        .iter()
        .map(|&f| {
            run_experiment(
                &cfg.clone()
                    .with_regime(Regime::Fp4Metis)
                    .with_rank_fraction(f),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let final_losses: Vec<f64> = runs.iter().map(RunReport::final_loss).collect();
    let considered: Vec<f64> = fractions
        .iter()
        .zip(&final_losses)
        .filter(|(f, _)| **f >= crate::spectral::SketchPlan::DEFAULT_RANK_FRACTION - 1e-12)
        .map(|(_, l)| *l)
        .collect();
    let spread = relative_spread(&considered);
    Ok(RankSweep {
        rank_fractions: fractions.to_vec(),
        final_losses,
        runs,
        spread,
        tolerance,
        within_tolerance: spread <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeComparison {
    pub runs: Vec<RunReport>,
    /// `(loss − loss_bf16) / loss_bf16` per run, in run order.
    pub gaps: Vec<f64>,
}

impl RegimeComparison {
    pub fn run(&self, regime: Regime) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.config.regime == regime)
    }
}

impl Report for RegimeComparison {
    fn kind(&self) -> &'static str {
        "regime_comparison"
    }

    fn visit_floats(&self, f: &mut dyn FnMut(&str, f64)) {
        visit_slice(f, "gaps", &self.gaps);
        for r in &self.runs {
            let label = r.config.regime.label();
            r.visit_floats(&mut |name, v| f(&format!("{label}.{name}"), v));
        }
    }

    fn series(&self) -> Option<Series> {
        let mut s = Series::new();
        for r in &self.runs {
            s = s.with(r.config.regime.label(), r.train_loss.clone());
        }
        Some(s)
    }
}

/// Trains the same model and seed under every regime.
pub fn compare_regimes(cfg: &ExperimentConfig) -> Result<RegimeComparison> {
    let runs = Regime::ALL
        .iter()
        .map(|&r| run_experiment(&cfg.clone().with_regime(r)))
        .collect::<Result<Vec<_>>>()?;
    let base = runs[0].final_loss();
    let gaps = runs
        .iter()
        .map(|r| if base > 0.0 { (r.final_loss() - base) / base } else { 0.0 })
        .collect();
    Ok(RegimeComparison { runs, gaps })
}
