//! Decomposed low-bit GeMM.
//!
//! A linear layer `Y = X W` is evaluated on spectral splits of its operands:
//! `W = U S Vᵀ + W_R` (trained as separate branches), `X = A Λ Bᵀ + X_R`
//! (re-split every call), and in the backward pass `D = P T Qᵀ + D_R`.
//! Every factor except the diagonals `S`, `Λ`, `T` is NVFP4-quantized.
//!
//! Low-rank factors are blocked along their rank axis. Residuals are blocked
//! along the contraction axis of the GeMM that consumes them, so each
//! residual is quantized once per orientation. With every branch empty the
//! computation is the plain direct-NVFP4 GeMM, bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp4::{dequantize, quantize_nvfp4, QuantizedBlockTensor, RngStream, DEFAULT_BLOCK_SIZE};
use crate::matrix::{gemm_op, Accumulation, DenseMatrix, Op};
use crate::precision::{round_bf16, round_finite, EmulatedFormat, RoundingMode};
use crate::spectral::{randomized_split, sampled_split, split_rank_k, SketchPlan, SpectralSplit};

/// Stream identifiers for stochastic rounding, one per quantized operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum OperandRole {
    ActLeft = 1,
    ActRight = 2,
    /// Activation residual blocked along the hidden axis (forward GeMM).
    ActResidual = 3,
    /// Activation residual blocked along the token axis (weight-gradient GeMM).
    ActResidualByToken = 4,
    WeightLeft = 5,
    WeightRight = 6,
    /// Weight residual blocked along its input axis (forward GeMM).
    WeightResidual = 7,
    /// Weight residual blocked along its output axis (input-gradient GeMM).
    WeightResidualByOutput = 8,
    GradLeft = 9,
    GradRight = 10,
    /// Output gradient residual blocked along the output axis (input-gradient GeMM).
    GradResidual = 11,
    /// Output gradient residual blocked along the token axis (weight-gradient GeMM).
    GradResidualByToken = 12,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// `false` runs the oracle: no quantization of any operand.
    pub quantize: bool,
    pub block_size: usize,
    pub rounding: RoundingMode,
    pub accumulation: Accumulation,
    /// Stochastic-rounding seed; each operand role draws its own stream.
    pub seed: u64,
}

impl QuantConfig {
    pub fn oracle() -> Self {
        Self {
            quantize: false,
            block_size: DEFAULT_BLOCK_SIZE,
            rounding: RoundingMode::NearestEven,
            accumulation: Accumulation::Wide,
            seed: 0,
        }
    }

    pub fn nvfp4(rounding: RoundingMode, seed: u64) -> Self {
        Self {
            quantize: true,
            block_size: DEFAULT_BLOCK_SIZE,
            rounding,
            accumulation: Accumulation::BF16,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Quantize-dequantize `m` for `role` (identity in oracle mode).
    pub fn operand(&self, m: &DenseMatrix, role: OperandRole) -> Result<Operand> {
        if !self.quantize {
            m.ensure_finite("operand")?;
            return Ok(Operand {
                value: m.clone(),
                quantized: None,
            });
        }
        let q = quantize_nvfp4(
            m,
            self.block_size,
            self.rounding,
            RngStream::new(self.seed, role as u64),
        )?;
        Ok(Operand {
            value: dequantize(&q),
            quantized: Some(q),
        })
    }

    /// GeMM with this config's accumulation, for products spanning the token axis.
    pub fn gemm(&self, a: &DenseMatrix, ta: Op, b: &DenseMatrix, tb: Op) -> Result<DenseMatrix> {
        gemm_op(a, ta, b, tb, self.accumulation)
    }

    /// Rounds a GeMM output to the accumulator format.
    pub fn finish(&self, m: DenseMatrix) -> DenseMatrix {
        match self.accumulation {
            Accumulation::Wide => m,
            Accumulation::Bf16 { .. } => m.map(round_bf16),
        }
    }

    /// Sum of GeMM outputs, rounded after every addition.
    pub fn sum_terms(&self, rows: usize, cols: usize, terms: Vec<DenseMatrix>) -> Result<DenseMatrix> {
        let mut it = terms.into_iter();
        let Some(first) = it.next() else {
            return Ok(DenseMatrix::zeros(rows, cols));
        };
        let mut acc = self.finish(first);
        for t in it {
            acc = self.finish(acc.add(&t)?);
        }
        Ok(acc)
    }
}

/// Wide product for small factor-sized GeMMs.
fn small(a: &DenseMatrix, ta: Op, b: &DenseMatrix, tb: Op) -> Result<DenseMatrix> {
    gemm_op(a, ta, b, tb, Accumulation::Wide)
}

/// A GeMM operand as consumed: dequantized values plus the quantized form.
#[derive(Debug, Clone, PartialEq)]
pub struct Operand {
    pub value: DenseMatrix,
    pub quantized: Option<QuantizedBlockTensor>,
}

/// How activations and output gradients are split on every call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    /// Rank, oversampling, sampling ratio and seed for both splits.
    pub sketch: SketchPlan,
    pub activations: bool,
    pub gradients: bool,
    /// Estimate the subspace from sampled sequences instead of the whole batch.
    pub sparse_sampling: bool,
    /// Rows per sequence (sampling unit).
    pub seq_len: usize,
}

const ACT_SALT: u64 = 0xa11c_e5a7;
const GRAD_SALT: u64 = 0x96ad_0e17;

impl DecompositionPlan {
    pub fn new(sketch: SketchPlan, seq_len: usize) -> Self {
        Self {
            sketch,
            activations: true,
            gradients: true,
            sparse_sampling: true,
            seq_len,
        }
    }

    /// No activation or gradient splitting.
    pub fn disabled() -> Self {
        Self {
            sketch: SketchPlan::new(0),
            activations: false,
            gradients: false,
            sparse_sampling: false,
            seq_len: 1,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sketch.seed = seed;
        self
    }

    fn split(&self, m: &DenseMatrix, enabled: bool, salt: u64) -> Result<SpectralSplit> {
        if !enabled || self.sketch.rank == 0 || m.rows() == 0 || m.cols() == 0 {
            m.ensure_finite("decomposition")?;
            return Ok(SpectralSplit::residual_only(m));
        }
        let plan = SketchPlan {
            seed: self.sketch.seed ^ salt,
            ..self.sketch
        };
        if self.sparse_sampling {
            sampled_split(m, &plan, self.seq_len.max(1))
        } else {
            randomized_split(m, &plan.fitted(m.rows(), m.cols()))
        }
    }
}

/// Weight stored as independently trained branches `u diag(s) vᵀ + residual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetisWeight {
    /// m x k
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    /// n x k
    pub v: DenseMatrix,
    /// m x n
    pub residual: DenseMatrix,
}

impl MetisWeight {
    /// Split a dense weight once with an exact top-`k` SVD; `k = 0` keeps it
    /// entirely in the residual.
    pub fn from_dense(w: &DenseMatrix, k: usize) -> Result<Self> {
        let split = if k == 0 {
            w.ensure_finite("weight")?;
            SpectralSplit::residual_only(w)
        } else {
            split_rank_k(w, k)?
        };
        Ok(Self {
            u: split.left,
            s: split.values,
            v: split.right,
            residual: split.residual,
        })
    }

    pub fn from_parts(u: DenseMatrix, s: Vec<f64>, v: DenseMatrix, residual: DenseMatrix) -> Result<Self> {
        let w = Self { u, s, v, residual };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.residual.shape();
        let k = self.s.len();
        if self.u.shape() != (m, k) || self.v.shape() != (n, k) {
            return Err(Error::Shape(format!(
                "u {:?}, s {}, v {:?}, residual {:?}",
                self.u.shape(),
                k,
                self.v.shape(),
                self.residual.shape()
            )));
        }
        if let Some(bad) = self.s.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                value: *bad,
                context: "weight singular values".into(),
            });
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// (inputs m, outputs n)
    pub fn shape(&self) -> (usize, usize) {
        self.residual.shape()
    }

    pub fn effective(&self) -> DenseMatrix {
        crate::spectral::low_rank_product(&self.u, &self.s, &self.v)
            .add(&self.residual)
            .expect("validated shapes")
    }
}

/// Every operand of one decomposed GeMM as it entered the arithmetic.
#[derive(Debug, Clone)]
pub struct QuantizedOperandSet {
    /// l x ka
    pub a: Operand,
    pub lambda: Vec<f64>,
    /// m x ka
    pub b: Operand,
    /// l x m, blocked along m.
    pub x_residual: Operand,
    /// m x l (transposed), blocked along l.
    pub x_residual_by_token: Operand,
    /// m x kw
    pub u: Operand,
    pub s: Vec<f64>,
    /// n x kw
    pub v: Operand,
    /// n x m (transposed), blocked along m.
    pub w_residual: Operand,
    /// m x n, blocked along n.
    pub w_residual_by_output: Operand,
}

impl QuantizedOperandSet {
    pub fn tokens(&self) -> usize {
        self.x_residual.value.rows()
    }

    pub fn inputs(&self) -> usize {
        self.x_residual.value.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w_residual.value.rows()
    }
}

/// Gradients of the loss with respect to the layer input and the four
/// weight branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetisGradients {
    pub dx: DenseMatrix,
    pub du: DenseMatrix,
    pub ds: Vec<f64>,
    pub dv: DenseMatrix,
    pub dw_r: DenseMatrix,
}

/// Decomposed quantized forward pass `Ŷ = X̄ Ū S V̄ᵀ + X̄ W̄_R`.
pub fn forward(
    x: &DenseMatrix,
    w: &MetisWeight,
    plan: &DecompositionPlan,
    cfg: &QuantConfig,
) -> Result<(DenseMatrix, QuantizedOperandSet)> {
    w.validate()?;
    let (l, m) = x.shape();
    let (wm, n) = w.shape();
    if wm != m {
        return Err(Error::Shape(format!("input {l}x{m} vs weight {wm}x{n}")));
    }
    let xs = plan.split(x, plan.activations, ACT_SALT)?;
    let ops = QuantizedOperandSet {
        a: cfg.operand(&xs.left, OperandRole::ActLeft)?,
        b: cfg.operand(&xs.right, OperandRole::ActRight)?,
        x_residual: cfg.operand(&xs.residual, OperandRole::ActResidual)?,
        x_residual_by_token: cfg.operand(&xs.residual.transpose(), OperandRole::ActResidualByToken)?,
        lambda: xs.values,
        u: cfg.operand(&w.u, OperandRole::WeightLeft)?,
        v: cfg.operand(&w.v, OperandRole::WeightRight)?,
        w_residual: cfg.operand(&w.residual.transpose(), OperandRole::WeightResidual)?,
        w_residual_by_output: cfg.operand(&w.residual, OperandRole::WeightResidualByOutput)?,
        s: w.s.clone(),
    };
    let (ka, kw) = (ops.lambda.len(), ops.s.len());
    let (a, b, xr) = (&ops.a.value, &ops.b.value, &ops.x_residual.value);
    let (u, v, wr) = (&ops.u.value, &ops.v.value, &ops.w_residual.value);

    let mut terms = Vec::with_capacity(4);
    if ka > 0 && kw > 0 {
        // Ā Λ (B̄ᵀŪ) S V̄ᵀ
        let core = small(b, Op::T, u, Op::N)?
            .scale_rows(&ops.lambda)?
            .scale_columns(&ops.s)?;
        let right = small(&core, Op::N, v, Op::T)?;
        terms.push(cfg.gemm(a, Op::N, &right, Op::N)?);
    }
    if kw > 0 {
        // X̄_R Ū S V̄ᵀ
        let xu = cfg.gemm(xr, Op::N, u, Op::N)?.scale_columns(&ops.s)?;
        terms.push(cfg.gemm(&xu, Op::N, v, Op::T)?);
    }
    if ka > 0 {
        // Ā Λ B̄ᵀ W̄_R
        let bw = small(b, Op::T, wr, Op::T)?.scale_rows(&ops.lambda)?;
        terms.push(cfg.gemm(a, Op::N, &bw, Op::N)?);
    }
    terms.push(cfg.gemm(xr, Op::N, wr, Op::T)?);
    let y = cfg.sum_terms(l, n, terms)?;
    Ok((y, ops))
}

/// `X̄ᵀ Z` expanded as `B̄ Λ (Āᵀ Z) + X̄_Rᵀ Z`, where `z_by_token` holds the
/// token-blocked copy of `Z` for the residual product (`n x l` if
/// `transposed`, else `l x n`).
fn x_transpose_times(
    ops: &QuantizedOperandSet,
    z_by_token: &DenseMatrix,
    transposed: bool,
    cfg: &QuantConfig,
) -> Result<DenseMatrix> {
    let tz = if transposed { Op::T } else { Op::N };
    let cols = if transposed { z_by_token.rows() } else { z_by_token.cols() };
    let mut terms = Vec::with_capacity(2);
    if !ops.lambda.is_empty() {
        let az = cfg.gemm(&ops.a.value, Op::T, z_by_token, tz)?.scale_rows(&ops.lambda)?;
        terms.push(small(&ops.b.value, Op::N, &az, Op::N)?);
    }
    terms.push(cfg.gemm(&ops.x_residual_by_token.value, Op::N, z_by_token, tz)?);
    cfg.sum_terms(ops.inputs(), cols, terms)
}

/// Decomposed quantized backward pass for `D = ∂L/∂Y`.
pub fn backward(
    d: &DenseMatrix,
    ops: &QuantizedOperandSet,
    plan: &DecompositionPlan,
    cfg: &QuantConfig,
) -> Result<MetisGradients> {
    let (l, m, n) = (ops.tokens(), ops.inputs(), ops.outputs());
    if d.shape() != (l, n) {
        return Err(Error::Shape(format!(
            "gradient {:?} vs forward output {l}x{n}",
            d.shape()
        )));
    }
    let ds_split = plan.split(d, plan.gradients, GRAD_SALT)?;
    let t = ds_split.values;
    let p = cfg.operand(&ds_split.left, OperandRole::GradLeft)?.value;
    let q = cfg.operand(&ds_split.right, OperandRole::GradRight)?.value;
    let dr = cfg.operand(&ds_split.residual, OperandRole::GradResidual)?.value;
    let dr_by_token = cfg
        .operand(&ds_split.residual.transpose(), OperandRole::GradResidualByToken)?
        .value;
    let (kg, kw) = (t.len(), ops.s.len());
    let (u, v) = (&ops.u.value, &ops.v.value);
    let s = &ops.s;

    // Q̄ᵀV̄ (kg x kw), shared by dx, du, ds
    let qv = small(&q, Op::T, v, Op::N)?;

    // dX = P̄TQ̄ᵀV̄SŪᵀ + P̄TQ̄ᵀW̄_Rᵀ + D̄_RV̄SŪᵀ + D̄_RW̄_Rᵀ
    let wr = &ops.w_residual_by_output.value;
    let mut dx_terms = Vec::with_capacity(4);
    if kg > 0 && kw > 0 {
        let core = qv.scale_rows(&t)?.scale_columns(s)?;
        let right = small(&core, Op::N, u, Op::T)?;
        dx_terms.push(cfg.gemm(&p, Op::N, &right, Op::N)?);
    }
    if kg > 0 {
        let right = small(&q, Op::T, wr, Op::T)?.scale_rows(&t)?;
        dx_terms.push(cfg.gemm(&p, Op::N, &right, Op::N)?);
    }
    if kw > 0 {
        let dv = cfg.gemm(&dr, Op::N, v, Op::N)?.scale_columns(s)?;
        dx_terms.push(cfg.gemm(&dv, Op::N, u, Op::T)?);
    }
    dx_terms.push(cfg.gemm(&dr, Op::N, wr, Op::T)?);
    let dx = cfg.sum_terms(l, m, dx_terms)?;

    // X̄ᵀP̄ (m x kg) and X̄ᵀD̄_R (m x n)
    let xp = if kg > 0 {
        Some(x_transpose_times(ops, &p, false, cfg)?)
    } else {
        None
    };
    let xd = x_transpose_times(ops, &dr_by_token, true, cfg)?;

    // dW_R = X̄ᵀP̄TQ̄ᵀ + X̄ᵀD̄_R
    let mut dw_terms = Vec::with_capacity(2);
    if let Some(xp) = &xp {
        dw_terms.push(small(&xp.scale_columns(&t)?, Op::N, &q, Op::T)?);
    }
    dw_terms.push(xd.clone());
    let dw_r = cfg.sum_terms(m, n, dw_terms)?;

    let (du, ds, dv) = if kw == 0 {
        (DenseMatrix::zeros(m, 0), Vec::new(), DenseMatrix::zeros(n, 0))
    } else {
        let xdv = small(&xd, Op::N, v, Op::N)?;
        let xdt_u = small(&xd, Op::T, u, Op::N)?;
        let mut du_terms = Vec::with_capacity(2);
        let mut dv_terms = Vec::with_capacity(2);
        let mut ds = vec![0.0; kw];
        if let Some(xp) = &xp {
            // X̄ᵀP̄ T Q̄ᵀV̄ S
            let tqv = qv.scale_rows(&t)?;
            let xptqv = small(xp, Op::N, &tqv, Op::N)?;
            du_terms.push(xptqv.scale_columns(s)?);
            // diag(Ūᵀ X̄ᵀP̄ T Q̄ᵀV̄)
            for (j, d) in ds.iter_mut().enumerate() {
                *d += (0..m).map(|i| u.get(i, j) * xptqv.get(i, j)).sum::<f64>();
            }
            // Q̄ T P̄ᵀX̄ Ū S
            let uxp = small(u, Op::T, xp, Op::N)?.scale_columns(&t)?;
            dv_terms.push(small(&q, Op::N, &uxp, Op::T)?.scale_columns(s)?);
        }
        du_terms.push(xdv.scale_columns(s)?);
        for (j, d) in ds.iter_mut().enumerate() {
            *d += (0..m).map(|i| u.get(i, j) * xdv.get(i, j)).sum::<f64>();
        }
        dv_terms.push(xdt_u.scale_columns(s)?);
        (
            cfg.sum_terms(m, kw, du_terms)?,
            ds,
            cfg.sum_terms(n, kw, dv_terms)?,
        )
    };

    Ok(MetisGradients {
        dx,
        du,
        ds,
        dv,
        dw_r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// First-order optimizer with per-parameter state keyed by name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Format the updated master copies are rounded to.
    pub master: EmulatedFormat,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            master: EmulatedFormat::Wide,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn with_master(mut self, master: EmulatedFormat) -> Self {
        self.master = master;
        self
    }

    /// Advance the step counter; call once per training step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// In-place update of `params` from `grads`.
    pub fn update(&mut self, name: &str, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{name}: {} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: name.to_string(),
                step: self.step,
            });
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step.max(1) as i32;
                let st = self.state.entry(name.to_string()).or_default();
                if st.first.len() != params.len() {
                    st.first = vec![0.0; params.len()];
                    st.second = vec![0.0; params.len()];
                }
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    st.first[i] = beta1 * st.first[i] + (1.0 - beta1) * g;
                    st.second[i] = beta2 * st.second[i] + (1.0 - beta2) * g * g;
                    let mh = st.first[i] / c1;
                    let vh = st.second[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        if self.master != EmulatedFormat::Wide {
            for p in params.iter_mut() {
                *p = round_finite(*p, self.master, RoundingMode::NearestEven, 0.0);
            }
        }
        Ok(())
    }

    pub fn update_matrix(&mut self, name: &str, m: &mut DenseMatrix, g: &DenseMatrix, lr: f64) -> Result<()> {
        if m.shape() != g.shape() {
            return Err(Error::Shape(format!("{name}: {:?} vs {:?}", m.shape(), g.shape())));
        }
        self.update(name, m.data_mut(), g.data(), lr)
    }
}

/// Update all four branches of `w` independently; optimizer state is keyed
/// under `name`.
pub fn apply_updates(
    w: &MetisWeight,
    grads: &MetisGradients,
    lr: f64,
    opt: &mut Optimizer,
    name: &str,
) -> Result<MetisWeight> {
    let mut next = w.clone();
    opt.update_matrix(&format!("{name}.u"), &mut next.u, &grads.du, lr)?;
    opt.update(&format!("{name}.s"), &mut next.s, &grads.ds, lr)?;
    opt.update_matrix(&format!("{name}.v"), &mut next.v, &grads.dv, lr)?;
    opt.update_matrix(&format!("{name}.residual"), &mut next.residual, &grads.dw_r, lr)?;
    if !next.effective().is_finite() {
        return Err(Error::Diverged { step: opt.step() });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    /// Tokens (batch x sequence).
    pub l: usize,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostItem {
    pub name: String,
    pub multiplies: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub shape: GemmShape,
    pub rank: usize,
    pub sampled_rows: usize,
    pub baseline_forward: u64,
    pub baseline_backward: u64,
    pub overhead: Vec<CostItem>,
    pub overhead_total: u64,
    pub overhead_ratio: f64,
}

/// Multiply counts of one training step of a layer: the plain GeMMs and the
/// extra work of rank-`k` decomposition with `sampled_rows` rows per split.
pub fn op_counter(shape: GemmShape, k: usize, sampled_rows: usize) -> CostReport {
    let (l, m, n) = (shape.l as u64, shape.m as u64, shape.n as u64);
    let (k64, lk) = (k as u64, sampled_rows as u64);
    let mixed = l * m * k64 + m * n * k64 + l * n * k64;
    let overhead = vec![
        CostItem {
            name: "forward_mixed_products".into(),
            multiplies: mixed,
        },
        CostItem {
            name: "backward_mixed_products".into(),
            multiplies: mixed,
        },
        CostItem {
            name: "activation_decomposition".into(),
            multiplies: lk * m * k64,
        },
        CostItem {
            name: "gradient_decomposition".into(),
            multiplies: lk * n * k64,
        },
    ];
    let baseline_forward = l * m * n;
    let baseline_backward = 2 * l * m * n;
    let overhead_total: u64 = overhead.iter().map(|c| c.multiplies).sum();
    let base = baseline_forward + baseline_backward;
    CostReport {
        shape,
        rank: k,
        sampled_rows,
        baseline_forward,
        baseline_backward,
        overhead,
        overhead_total,
        overhead_ratio: if base == 0 {
            0.0
        } else {
            overhead_total as f64 / base as f64
        },
    }
}
