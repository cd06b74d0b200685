//! Comparison regimes: direct NVFP4 GeMM and randomized-Hadamard NVFP4 GeMM.
//!
//! Both quantize each operand along the contraction axis of its GeMM and
//! draw stochastic-rounding streams from the same operand roles as the
//! decomposed engine, so the direct regime equals the decomposed one with
//! every branch empty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{OperandRole, QuantConfig};
use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, Op};

/// Randomized Hadamard rotation `R = H diag(signs) / √dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HadamardPlan {
    dim: usize,
    signs: Vec<f64>,
    seed: u64,
}

impl HadamardPlan {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if !dim.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "hadamard dimension {dim} is not a power of two"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signs = (0..dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Ok(Self { dim, signs, seed })
    }

    /// Plan for a contraction of length `len`, zero-padded to a power of two.
    pub fn covering(len: usize, seed: u64) -> Self {
        Self::new(len.max(1).next_power_of_two(), seed).expect("power of two")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Dense orthogonal `R`.
    pub fn transform(&self) -> DenseMatrix {
        let h = hadamard_matrix(self.dim).expect("power of two");
        let norm = (self.dim as f64).sqrt();
        h.scale_columns(&self.signs)
            .expect("sign vector matches dim")
            .scale(1.0 / norm)
    }

    /// `m R`, with the columns of `m` zero-padded up to `dim`.
    pub fn rotate_rows(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        let (rows, cols) = m.shape();
        if cols > self.dim {
            return Err(Error::Shape(format!(
                "{cols} columns exceed hadamard dimension {}",
                self.dim
            )));
        }
        let norm = 1.0 / (self.dim as f64).sqrt();
        let mut out = DenseMatrix::zeros(rows, self.dim);
        let mut buf = vec![0.0; self.dim];
        for i in 0..rows {
            buf[..cols].copy_from_slice(m.row(i));
            buf[cols..].iter_mut().for_each(|v| *v = 0.0);
            butterfly(&mut buf);
            for (j, v) in buf.iter().enumerate() {
                out.set(i, j, v * self.signs[j] * norm);
            }
        }
        Ok(out)
    }
}

/// Sylvester-ordered `±1` Hadamard matrix; `H Hᵀ = n I`.
pub fn hadamard_matrix(n: usize) -> Result<DenseMatrix> {
    if !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("{n} is not a power of two")));
    }
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }))
}

/// Unnormalized in-place Walsh-Hadamard butterfly.
fn butterfly(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (v[i], v[i + h]);
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Orthonormal Walsh-Hadamard transform `H v / √n`.
pub fn fast_hadamard(v: &[f64]) -> Result<Vec<f64>> {
    if !v.len().is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "length {} is not a power of two",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    butterfly(&mut out);
    let norm = 1.0 / (v.len() as f64).sqrt();
    out.iter_mut().for_each(|x| *x *= norm);
    Ok(out)
}

/// `a bᵀ` where both operands hold the contraction axis in their columns:
/// each is quantized along that axis, optionally after rotation by `plan`.
fn contract_rows(
    a: &DenseMatrix,
    a_role: OperandRole,
    b: &DenseMatrix,
    b_role: OperandRole,
    plan: Option<&HadamardPlan>,
    cfg: &QuantConfig,
) -> Result<DenseMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "contraction {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (a, b) = match plan {
        Some(p) => (p.rotate_rows(a)?, p.rotate_rows(b)?),
        None => (a.clone(), b.clone()),
    };
    let qa = cfg.operand(&a, a_role)?.value;
    let qb = cfg.operand(&b, b_role)?.value;
    Ok(cfg.finish(cfg.gemm(&qa, Op::N, &qb, Op::T)?))
}

fn check_forward(x: &DenseMatrix, w: &DenseMatrix) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok(())
}

fn check_backward(d: &DenseMatrix, x: &DenseMatrix, w: &DenseMatrix) -> Result<()> {
    check_forward(x, w)?;
    if d.shape() != (x.rows(), w.cols()) {
        return Err(Error::Shape(format!(
            "gradient {:?} vs output {}x{}",
            d.shape(),
            x.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Input and weight gradients of a plain linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGradients {
    pub dx: DenseMatrix,
    pub dw: DenseMatrix,
}

/// `Q(x) Q(w)` with both operands blocked along the shared axis.
pub fn direct_nvfp4_gemm(x: &DenseMatrix, w: &DenseMatrix, cfg: &QuantConfig) -> Result<DenseMatrix> {
    check_forward(x, w)?;
    contract_rows(
        x,
        OperandRole::ActResidual,
        &w.transpose(),
        OperandRole::WeightResidual,
        None,
        cfg,
    )
}

/// `dX = Q(D) Q(W)ᵀ` and `dW = Q(X)ᵀ Q(D)`.
pub fn direct_nvfp4_backward(
    d: &DenseMatrix,
    x: &DenseMatrix,
    w: &DenseMatrix,
    cfg: &QuantConfig,
) -> Result<LinearGradients> {
    check_backward(d, x, w)?;
    let dx = contract_rows(
        d,
        OperandRole::GradResidual,
        w,
        OperandRole::WeightResidualByOutput,
        None,
        cfg,
    )?;
    let dw = contract_rows(
        &x.transpose(),
        OperandRole::ActResidualByToken,
        &d.transpose(),
        OperandRole::GradResidualByToken,
        None,
        cfg,
    )?;
    Ok(LinearGradients { dx, dw })
}

/// `Q(x R) Q(Rᵀ w)`; `plan` must cover the shared dimension.
pub fn hadamard_gemm(
    x: &DenseMatrix,
    w: &DenseMatrix,
    plan: &HadamardPlan,
    cfg: &QuantConfig,
) -> Result<DenseMatrix> {
    check_forward(x, w)?;
    contract_rows(
        x,
        OperandRole::ActResidual,
        &w.transpose(),
        OperandRole::WeightResidual,
        Some(plan),
        cfg,
    )
}

const FORWARD_SALT: u64 = 0x4ad4_f0e0;
const INPUT_GRAD_SALT: u64 = 0x4ad4_d0e1;
const WEIGHT_GRAD_SALT: u64 = 0x4ad4_d0e2;

/// Randomized-Hadamard recipe for one layer: every GeMM of the step rotates
/// its contraction axis with signs fixed by `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HadamardRecipe {
    pub seed: u64,
}

impl HadamardRecipe {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn forward(&self, x: &DenseMatrix, w: &DenseMatrix, cfg: &QuantConfig) -> Result<DenseMatrix> {
        let plan = HadamardPlan::covering(x.cols(), self.seed ^ FORWARD_SALT);
        hadamard_gemm(x, w, &plan, cfg)
    }

    pub fn backward(
        &self,
        d: &DenseMatrix,
        x: &DenseMatrix,
        w: &DenseMatrix,
        cfg: &QuantConfig,
    ) -> Result<LinearGradients> {
        check_backward(d, x, w)?;
        let dx_plan = HadamardPlan::covering(d.cols(), self.seed ^ INPUT_GRAD_SALT);
        let dw_plan = HadamardPlan::covering(x.rows(), self.seed ^ WEIGHT_GRAD_SALT);
        let dx = contract_rows(
            d,
            OperandRole::GradResidual,
            w,
            OperandRole::WeightResidualByOutput,
            Some(&dx_plan),
            cfg,
        )?;
        let dw = contract_rows(
            &x.transpose(),
            OperandRole::ActResidualByToken,
            &d.transpose(),
            OperandRole::GradResidualByToken,
            Some(&dw_plan),
            cfg,
        )?;
        Ok(LinearGradients { dx, dw })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::RoundingMode;
    use crate::synthetic::gaussian_matrix;

    #[test]
    fn delta_spreads_uniformly() {
        let out = fast_hadamard(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5; 4]);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fast_hadamard(&[1.0, 2.0, 3.0]).is_err());
        assert!(HadamardPlan::new(12, 0).is_err());
        assert!(hadamard_matrix(6).is_err());
    }

    #[test]
    fn sylvester_matrix_is_orthogonal_up_to_dim() {
        for n in [1, 2, 8, 32] {
            let h = hadamard_matrix(n).unwrap();
            let hht = h.matmul(&h.transpose()).unwrap();
            assert_eq!(hht, DenseMatrix::identity(n).scale(n as f64));
        }
    }

    #[test]
    fn rotation_matches_dense_transform() {
        let plan = HadamardPlan::new(16, 3).unwrap();
        let x = gaussian_matrix(5, 16, 1.0, 4);
        let dense = x.matmul(&plan.transform()).unwrap();
        let fast = plan.rotate_rows(&x).unwrap();
        assert!(fast.sub(&dense).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn padding_keeps_product() {
        let x = gaussian_matrix(6, 10, 1.0, 1);
        let w = gaussian_matrix(10, 7, 1.0, 2);
        let plan = HadamardPlan::covering(10, 9);
        assert_eq!(plan.dim(), 16);
        let y = hadamard_gemm(&x, &w, &plan, &QuantConfig::oracle()).unwrap();
        assert!(y.relative_error(&x.matmul(&w).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn zero_weight_gives_zero_output() {
        let x = gaussian_matrix(4, 16, 1.0, 1);
        let w = DenseMatrix::zeros(16, 3);
        let cfg = QuantConfig::nvfp4(RoundingMode::StochasticRound, 5);
        assert_eq!(direct_nvfp4_gemm(&x, &w, &cfg).unwrap(), DenseMatrix::zeros(4, 3));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = DenseMatrix::zeros(2, 3);
        let w = DenseMatrix::zeros(4, 2);
        let cfg = QuantConfig::oracle();
        assert!(matches!(direct_nvfp4_gemm(&x, &w, &cfg), Err(Error::Shape(_))));
        let d = DenseMatrix::zeros(2, 5);
        let w = DenseMatrix::zeros(3, 2);
        assert!(direct_nvfp4_backward(&d, &x, &w, &cfg).is_err());
    }
}
