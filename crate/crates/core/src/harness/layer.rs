use crate::baselines::HadamardRecipe;
use crate::engine::{
    apply_updates, backward, forward, DecompositionPlan, MetisGradients, MetisWeight, Optimizer,
    QuantConfig, QuantizedOperandSet,
};
use crate::error::Result;
use crate::matrix::DenseMatrix;
use crate::spectral::SketchPlan;

use super::config::{ExperimentConfig, Regime};

/// Mixes `parts` into `base` (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone)]
enum Route {
    Engine { plan: DecompositionPlan, quant: QuantConfig },
    Hadamard { recipe: HadamardRecipe, quant: QuantConfig },
}

/// `y = x W + b` with `W` held as a decomposed weight and the GeMMs of the
/// configured regime.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: MetisWeight,
    pub bias: Vec<f64>,
    id: u64,
    seed: u64,
    route: Route,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    x: DenseMatrix,
    ops: Option<QuantizedOperandSet>,
    step: u64,
}

impl LinearCache {
    /// The layer input the cache was built from.
    pub fn input(&self) -> &DenseMatrix {
        &self.x
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: MetisGradients,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Wraps the dense initial weight `w` for the regime in `cfg`. Under the
    /// decomposed regime the weight is split once here.
    pub fn new(name: &str, id: u64, w: &DenseMatrix, cfg: &ExperimentConfig) -> Result<Self> {
        let (m, n) = w.shape();
        let k = cfg.rank_for(m, n);
        let ab = &cfg.ablation;
        let metis = cfg.regime == Regime::Fp4Metis;
        let k_w = if metis && ab.decompose_weights { k } else { 0 };
        let weight = MetisWeight::from_dense(w, k_w)?;
        let quant = match cfg.regime {
            Regime::Bf16 => QuantConfig::oracle(),
            _ => QuantConfig::nvfp4(cfg.rounding, 0),
        };
        let route = match cfg.regime {
            Regime::Fp4Hadamard => Route::Hadamard {
                recipe: HadamardRecipe::new(derive_seed(cfg.seed, &[id, 0x4ad4])),
                quant,
            },
            _ => {
                let plan = if metis && (ab.decompose_activations || ab.decompose_gradients) && k > 0 {
                    let sketch = SketchPlan {
                        rank: k,
                        oversample: cfg.oversample,
                        sample_ratio: cfg.sample_ratio,
                        power_iters: cfg.power_iters,
                        seed: 0,
                    };
                    let mut plan = DecompositionPlan::new(sketch, cfg.model.seq_len());
                    plan.activations = ab.decompose_activations;
                    plan.gradients = ab.decompose_gradients;
                    plan.sparse_sampling = ab.sparse_sampling;
                    plan
                } else {
                    DecompositionPlan::disabled()
                };
                Route::Engine { plan, quant }
            }
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias: vec![0.0; n],
            id,
            seed: cfg.seed,
            route,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn plan(&self) -> Option<&DecompositionPlan> {
        match &self.route {
            Route::Engine { plan, .. } => Some(plan),
            Route::Hadamard { .. } => None,
        }
    }

    fn step_seed(&self, step: u64) -> u64 {
        derive_seed(self.seed, &[self.id, step])
    }

    pub fn forward(&self, x: &DenseMatrix, step: u64) -> Result<(DenseMatrix, LinearCache)> {
        let seed = self.step_seed(step);
        let (y, ops) = match &self.route {
            Route::Engine { plan, quant } => {
                let (y, ops) = forward(x, &self.weight, &plan.with_seed(seed), &quant.with_seed(seed))?;
                (y, Some(ops))
            }
            Route::Hadamard { recipe, quant } => {
                (recipe.forward(x, &self.weight.residual, &quant.with_seed(seed))?, None)
            }
        };
        let y = add_bias(y, &self.bias);
        Ok((
            y,
            LinearCache {
                x: x.clone(),
                ops,
                step,
            },
        ))
    }

    pub fn backward(&self, d: &DenseMatrix, cache: &LinearCache) -> Result<LinearGrads> {
        let seed = self.step_seed(cache.step);
        let weight = match (&self.route, &cache.ops) {
            (Route::Engine { plan, quant }, Some(ops)) => {
                backward(d, ops, &plan.with_seed(seed), &quant.with_seed(seed))?
            }
            (Route::Hadamard { recipe, quant }, _) => {
                let g = recipe.backward(d, &cache.x, &self.weight.residual, &quant.with_seed(seed))?;
                let (m, n) = self.shape();
                MetisGradients {
                    dx: g.dx,
                    du: DenseMatrix::zeros(m, 0),
                    ds: Vec::new(),
                    dv: DenseMatrix::zeros(n, 0),
                    dw_r: g.dw,
                }
            }
            (Route::Engine { .. }, None) => unreachable!("engine forward always caches operands"),
        };
        let bias = column_sums(d);
        Ok(LinearGrads { weight, bias })
    }

    pub fn apply(&mut self, grads: &LinearGrads, lr: f64, opt: &mut Optimizer) -> Result<()> {
        self.weight = apply_updates(&self.weight, &grads.weight, lr, opt, &self.name)?;
        opt.update(&format!("{}.bias", self.name), &mut self.bias, &grads.bias, lr)
    }
}

pub(crate) fn add_bias(mut y: DenseMatrix, bias: &[f64]) -> DenseMatrix {
    let n = y.cols();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += bias[i % n];
    }
    y
}

pub(crate) fn column_sums(d: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; d.cols()];
    for i in 0..d.rows() {
        for (o, v) in out.iter_mut().zip(d.row(i)) {
            *o += v;
        }
    }
    out
}
