//! Spectral machinery: exact and truncated SVD, Gaussian-sketch randomized
//! SVD, sequence-sampled subspace estimation, and the spectrum metrics
//! (elbow fraction, subspace alignment, spectral distortion).
//!
//! Singular vectors follow one sign convention everywhere: the
//! largest-magnitude entry of every left vector is positive.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Components with a singular value at or below this fraction of the largest
/// one are treated as numerically zero and dropped from splits.
const RANK_TOLERANCE: f64 = 1e-13;
const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Svd {
    /// Descending.
    pub values: Vec<f64>,
    /// rows x r, orthonormal columns.
    pub left: DenseMatrix,
    /// cols x r, orthonormal columns.
    pub right: DenseMatrix,
}

/// Low-rank factors plus residual: `left * diag(values) * rightᵀ + residual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSplit {
    pub left: DenseMatrix,
    pub values: Vec<f64>,
    pub right: DenseMatrix,
    pub residual: DenseMatrix,
}

impl SpectralSplit {
    /// Everything in the residual, no low-rank branch.
    pub fn residual_only(m: &DenseMatrix) -> Self {
        Self {
            left: DenseMatrix::zeros(m.rows(), 0),
            values: Vec::new(),
            right: DenseMatrix::zeros(m.cols(), 0),
            residual: m.clone(),
        }
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn low_rank(&self) -> DenseMatrix {
        low_rank_product(&self.left, &self.values, &self.right)
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.low_rank()
            .add(&self.residual)
            .expect("split shapes are consistent")
    }
}

/// `left * diag(values) * rightᵀ`.
pub fn low_rank_product(left: &DenseMatrix, values: &[f64], right: &DenseMatrix) -> DenseMatrix {
    let scaled = left.scale_columns(values).expect("one value per column");
    scaled
        .matmul(&right.transpose())
        .expect("factor shapes are consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchPlan {
    pub rank: usize,
    pub oversample: usize,
    /// Fraction of sequences used to estimate the dominant subspace.
    pub sample_ratio: f64,
    pub power_iters: usize,
    pub seed: u64,
}

impl SketchPlan {
    pub const DEFAULT_OVERSAMPLE: usize = 8;
    pub const DEFAULT_POWER_ITERS: usize = 1;
    pub const DEFAULT_SAMPLE_RATIO: f64 = 0.01;
    pub const DEFAULT_RANK_FRACTION: f64 = 0.015;

    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            oversample: Self::DEFAULT_OVERSAMPLE,
            sample_ratio: Self::DEFAULT_SAMPLE_RATIO,
            power_iters: Self::DEFAULT_POWER_ITERS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_oversample(mut self, oversample: usize) -> Self {
        self.oversample = oversample;
        self
    }

    pub fn with_sample_ratio(mut self, ratio: f64) -> Self {
        self.sample_ratio = ratio;
        self
    }

    pub fn with_power_iters(mut self, iters: usize) -> Self {
        self.power_iters = iters;
        self
    }

    /// ceil(fraction * min(rows, cols)).
    pub fn rank_for(rows: usize, cols: usize, fraction: f64) -> usize {
        (fraction * rows.min(cols) as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("sketch rank must be >= 1".into()));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample ratio {} outside (0, 1]",
                self.sample_ratio
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.rank + self.oversample
    }

    /// Same plan with rank and oversampling shrunk to fit a rows x cols matrix.
    pub fn fitted(&self, rows: usize, cols: usize) -> Self {
        let limit = rows.min(cols);
        let rank = self.rank.min(limit);
        Self {
            rank,
            oversample: self.oversample.min(limit - rank),
            ..*self
        }
    }
}

fn nalgebra_svd(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    // nalgebra's own default tolerance; a tighter one can stop on a wrong
    // factorization
    let svd = nalgebra::SVD::try_new(m.clone(), true, true, 5.0 * f64::EPSILON, 0)
        .ok_or_else(|| Error::InvalidArgument("SVD failed to converge".into()))?;
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let v = DMatrix::from_fn(v.nrows(), order.len(), |i, j| v[(i, order[j])]);
    Ok((values, u, v))
}

/// Flip column pairs so each left column's largest-magnitude entry is positive.
fn fix_signs(left: &mut DMatrix<f64>, right: &mut DMatrix<f64>) {
    for j in 0..left.ncols() {
        let mut best = 0.0f64;
        for i in 0..left.nrows() {
            if left[(i, j)].abs() > best.abs() {
                best = left[(i, j)];
            }
        }
        if best < 0.0 {
            left.column_mut(j).neg_mut();
            right.column_mut(j).neg_mut();
        }
    }
}

/// Full (thin) SVD with descending values and the crate sign convention.
pub fn svd_full(m: &DenseMatrix) -> Result<Svd> {
    m.ensure_finite("svd_full")?;
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(Svd {
            values: Vec::new(),
            left: DenseMatrix::zeros(m.rows(), 0),
            right: DenseMatrix::zeros(m.cols(), 0),
        });
    }
    let (values, mut u, mut v) = nalgebra_svd(&m.to_nalgebra())?;
    fix_signs(&mut u, &mut v);
    Ok(Svd {
        values,
        left: DenseMatrix::from_nalgebra(&u),
        right: DenseMatrix::from_nalgebra(&v),
    })
}

/// Keep the leading `k` components whose values are numerically nonzero.
fn truncate(
    source: &DenseMatrix,
    values: &[f64],
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    k: usize,
) -> SpectralSplit {
    let top = values.first().copied().unwrap_or(0.0);
    let keep = values
        .iter()
        .take(k)
        .take_while(|&&s| s > 0.0 && s > top * RANK_TOLERANCE)
        .count();
    let mut u = u.columns(0, keep).into_owned();
    let mut v = v.columns(0, keep).into_owned();
    fix_signs(&mut u, &mut v);
    let left = DenseMatrix::from_nalgebra(&u);
    let right = DenseMatrix::from_nalgebra(&v);
    let values = values[..keep].to_vec();
    let residual = source
        .sub(&low_rank_product(&left, &values, &right))
        .expect("same shape");
    SpectralSplit {
        left,
        values,
        right,
        residual,
    }
}

/// Exact top-`k` split via the full SVD.
pub fn split_rank_k(m: &DenseMatrix, k: usize) -> Result<SpectralSplit> {
    let max = m.rows().min(m.cols());
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { k, max });
    }
    m.ensure_finite("split_rank_k")?;
    let (values, u, v) = nalgebra_svd(&m.to_nalgebra())?;
    Ok(truncate(m, &values, &u, &v, k))
}

fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// Randomized SVD: Gaussian sketch `Z = MΩ` of width rank + oversample, thin
/// QR `Z = HR`, optional power iterations, then an exact SVD of the small
/// matrix `HᵀM`, truncated to the plan's rank.
pub fn randomized_split(m: &DenseMatrix, plan: &SketchPlan) -> Result<SpectralSplit> {
    plan.validate()?;
    let width = plan.width();
    if width > m.rows().min(m.cols()) {
        return Err(Error::SketchTooWide {
            width,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    m.ensure_finite("randomized_split")?;
    let a = m.to_nalgebra();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let omega = DMatrix::from_fn(m.cols(), width, |_, _| StandardNormal.sample(&mut rng));
    let mut h = orthonormal_columns(&(&a * omega));
    for _ in 0..plan.power_iters {
        let back = orthonormal_columns(&(a.transpose() * &h));
        h = orthonormal_columns(&(&a * back));
    }
    let small = h.transpose() * &a;
    let (values, ub, vb) = nalgebra_svd(&small)?;
    let u = &h * ub;
    Ok(truncate(m, &values, &u, &vb, plan.rank))
}

/// Sequence indices (sorted) drawn without replacement for subspace estimation.
///
/// At least enough sequences are taken to give the sketch `plan.width()` rows.
pub fn sample_sequences(rows: usize, seq_len: usize, plan: &SketchPlan) -> Result<Vec<usize>> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    let n_seq = rows.div_ceil(seq_len);
    if n_seq == 0 {
        return Err(Error::InvalidArgument("empty sample: no sequences".into()));
    }
    let by_ratio = (plan.sample_ratio * n_seq as f64).ceil() as usize;
    let by_width = plan.width().div_ceil(seq_len);
    let count = by_ratio.max(by_width).max(1).min(n_seq);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_5a3b_1e00_0000);
    let mut picked = sample(&mut rng, n_seq, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn sampled_rows(x: &DenseMatrix, seq_len: usize, plan: &SketchPlan) -> Result<DenseMatrix> {
    let seqs = sample_sequences(x.rows(), seq_len, plan)?;
    let rows: Vec<usize> = seqs
        .iter()
        .flat_map(|&s| (s * seq_len)..((s + 1) * seq_len).min(x.rows()))
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    Ok(x.select_rows(&rows))
}

/// Dominant right-subspace basis (cols x k) estimated from a random subset of
/// whole sequences (`seq_len` consecutive rows each).
pub fn sampled_subspace(x: &DenseMatrix, plan: &SketchPlan, seq_len: usize) -> Result<DenseMatrix> {
    plan.validate()?;
    let sub = sampled_rows(x, seq_len, plan)?;
    let fitted = plan.fitted(sub.rows(), sub.cols());
    Ok(randomized_split(&sub, &fitted)?.right)
}

/// Split `x` on a given right basis: the low-rank part is `x·B·Bᵀ`, refactored
/// through a thin SVD of `x·B` so both factor sets are orthonormal and the
/// values descending.
pub fn project_split(x: &DenseMatrix, basis: &DenseMatrix) -> Result<SpectralSplit> {
    if basis.rows() != x.cols() {
        return Err(Error::Shape(format!(
            "basis has {} rows, matrix has {} columns",
            basis.rows(),
            x.cols()
        )));
    }
    let coeffs = x.matmul(basis)?;
    if basis.cols() == 0 || x.rows() == 0 {
        return Ok(SpectralSplit::residual_only(x));
    }
    let (values, ua, va) = nalgebra_svd(&coeffs.to_nalgebra())?;
    let right = &basis.to_nalgebra() * va;
    let low = coeffs.matmul(&basis.transpose())?;
    let k = values.len();
    let mut split = truncate(x, &values, &ua, &right, k);
    if split.rank() == k {
        // x·B·Bᵀ evaluated directly is closer to the true projection residual
        split.residual = x.sub(&low)?;
    }
    Ok(split)
}

/// Sampled-subspace split of the full batch: estimate the basis on sampled
/// sequences, then project every row onto it.
pub fn sampled_split(x: &DenseMatrix, plan: &SketchPlan, seq_len: usize) -> Result<SpectralSplit> {
    let basis = sampled_subspace(x, plan, seq_len)?;
    project_split(x, &basis)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Elbow {
    /// 1-based index of maximum curvature.
    pub index: usize,
    /// `index / r`.
    pub fraction: f64,
    pub max_curvature: f64,
    /// Set when the curve has no measurable bend (flat or log-linear).
    pub degenerate: bool,
}

const FLAT_CURVATURE: f64 = 1e-6;

/// Point of maximum curvature of the (normalized index, normalized log σ)
/// curve, using second differences. Ties go to the smallest index.
pub fn elbow_fraction(sigma: &[f64]) -> Result<Elbow> {
    let r = sigma.len();
    if r < 3 {
        return Err(Error::InvalidArgument(format!(
            "elbow needs at least 3 values, got {r}"
        )));
    }
    if let Some(&bad) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "spectrum values must be positive and finite, got {bad}"
        )));
    }
    let logs: Vec<f64> = sigma.iter().map(|s| s.ln()).collect();
    let hi = logs.iter().copied().fold(f64::MIN, f64::max);
    let lo = logs.iter().copied().fold(f64::MAX, f64::min);
    let span = hi - lo;
    let y: Vec<f64> = if span > 0.0 {
        logs.iter().map(|l| (l - lo) / span).collect()
    } else {
        vec![0.0; r]
    };
    let h = 1.0 / (r - 1) as f64;
    let mut best = (1usize, 0.0f64);
    for i in 1..r - 1 {
        let d1 = (y[i + 1] - y[i - 1]) / (2.0 * h);
        let d2 = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h);
        let kappa = d2.abs() / (1.0 + d1 * d1).powf(1.5);
        if kappa > best.1 {
            best = (i, kappa);
        }
    }
    let degenerate = best.1 <= FLAT_CURVATURE;
    let i = if degenerate { 1 } else { best.0 };
    Ok(Elbow {
        index: i + 1,
        fraction: (i + 1) as f64 / r as f64,
        max_curvature: best.1,
        degenerate,
    })
}

fn orthonormality_defect(b: &DMatrix<f64>) -> f64 {
    let gram = b.transpose() * b;
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Mean squared canonical correlation between two orthonormal bases.
///
/// Bases that are not orthonormal are re-orthonormalized with a warning.
pub fn subspace_alignment(basis_a: &DenseMatrix, basis_b: &DenseMatrix) -> Result<f64> {
    if basis_a.rows() != basis_b.rows() {
        return Err(Error::Shape(format!(
            "bases live in R^{} and R^{}",
            basis_a.rows(),
            basis_b.rows()
        )));
    }
    if basis_a.cols() != basis_b.cols() {
        return Err(Error::Shape(format!(
            "bases have {} and {} columns",
            basis_a.cols(),
            basis_b.cols()
        )));
    }
    let k = basis_a.cols();
    if k == 0 {
        return Err(Error::InvalidArgument("empty basis".into()));
    }
    let prepare = |b: &DenseMatrix, name: &str| {
        let m = b.to_nalgebra();
        if orthonormality_defect(&m) > ORTHONORMAL_TOLERANCE {
            log::warn!("{name} is not orthonormal; re-orthonormalizing");
            orthonormal_columns(&m)
        } else {
            m
        }
    };
    let a = prepare(basis_a, "basis_a");
    let b = prepare(basis_b, "basis_b");
    let cross = a.transpose() * b;
    let sv = cross.singular_values();
    let score = sv.iter().map(|s| s * s).sum::<f64>() / k as f64;
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentDistortion {
    /// 0-based component index.
    pub index: usize,
    pub value_rel_error: f64,
    /// |cos| between reference and perturbed left singular vectors.
    pub vector_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDistortion {
    pub components: Vec<ComponentDistortion>,
    /// Components whose reference singular value is zero.
    pub skipped: Vec<usize>,
}

impl SpectralDistortion {
    pub fn mean_value_error(&self) -> f64 {
        mean(self.components.iter().map(|c| c.value_rel_error))
    }

    pub fn mean_cosine(&self) -> f64 {
        mean(self.components.iter().map(|c| c.vector_cosine))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-component relative singular-value error and left-vector alignment of
/// `perturbed` against `reference`, for the top `k` components.
pub fn spectral_distortion(
    reference: &DenseMatrix,
    perturbed: &DenseMatrix,
    k: usize,
) -> Result<SpectralDistortion> {
    if reference.shape() != perturbed.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            reference.shape(),
            perturbed.shape()
        )));
    }
    let max = reference.rows().min(reference.cols());
    if k > max {
        return Err(Error::RankOutOfRange { k, max });
    }
    let a = svd_full(reference)?;
    let b = svd_full(perturbed)?;
    let mut components = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for i in 0..k {
        let sigma = a.values[i];
        if sigma == 0.0 || sigma <= a.values[0] * RANK_TOLERANCE {
            skipped.push(i);
            continue;
        }
        let cos: f64 = (0..reference.rows())
            .map(|r| a.left.get(r, i) * b.left.get(r, i))
            .sum();
        components.push(ComponentDistortion {
            index: i,
            value_rel_error: (b.values[i] - sigma).abs() / sigma,
            vector_cosine: cos.abs(),
        });
    }
    Ok(SpectralDistortion {
        components,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gaussian_matrix, planted_matrix, random_orthonormal};
    use nalgebra::SymmetricEigen;

    fn orthonormal_err(m: &DenseMatrix) -> f64 {
        orthonormality_defect(&m.to_nalgebra())
    }

    #[test]
    fn identity_and_diagonal() {
        let s = svd_full(&DenseMatrix::identity(4)).unwrap();
        assert!(s.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        let d = svd_full(&DenseMatrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(d.values.len(), 3);
        for (v, e) in d.values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((v - e).abs() < 1e-14);
        }
        // axis aligned, positive largest entry
        assert!((d.left.get(1, 0) - 1.0).abs() < 1e-14);
        assert!((d.left.get(2, 1) - 1.0).abs() < 1e-14);
        assert!((d.left.get(0, 2) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_matches_gram_eigendecomposition() {
        let m = gaussian_matrix(50, 20, 1.0, 3);
        let s = svd_full(&m).unwrap();
        let recon = low_rank_product(&s.left, &s.values, &s.right);
        assert!(recon.relative_error(&m).unwrap() < 1e-10);
        let gram = m.transpose().matmul(&m).unwrap().to_nalgebra();
        let mut eig: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in s.values.iter().zip(&eig) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(orthonormal_err(&s.left) < 1e-10);
        assert!(orthonormal_err(&s.right) < 1e-10);
        for j in 0..s.left.cols() {
            let col = s.left.column(j);
            let big = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn split_full_rank_and_rank_one() {
        let m = gaussian_matrix(9, 6, 1.0, 4);
        let s = split_rank_k(&m, 6).unwrap();
        assert!(s.residual.frobenius_norm() < 1e-8);
        let u: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let v: Vec<f64> = (0..5).map(|i| (i as f64).sin() + 0.3).collect();
        let outer = DenseMatrix::from_fn(7, 5, |i, j| u[i] * v[j]);
        let s1 = split_rank_k(&outer, 1).unwrap();
        assert!(s1.residual.frobenius_norm() < 1e-10);
        assert!(split_rank_k(&outer, 0).is_err());
        assert!(split_rank_k(&outer, 6).is_err());
    }

    #[test]
    fn split_residual_orthogonal_to_low_rank() {
        let m = gaussian_matrix(30, 20, 1.0, 8);
        let s = split_rank_k(&m, 5).unwrap();
        let ip = s.low_rank().dot(&s.residual).unwrap();
        assert!(ip.abs() < 1e-8 * m.frobenius_norm().powi(2));
        assert!(s.reconstruct().relative_error(&m).unwrap() < 1e-12);
        assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn anisotropic_residual_is_narrow() {
        // sigma_i = 100 * 0.5^i on top of a 0.01 noise floor, top 3% removed
        let n = 200;
        let spectrum: Vec<f64> = (0..n).map(|i| 100.0 * 0.5f64.powi(i as i32) + 0.01).collect();
        let m = planted_matrix(n, n, &spectrum, 12);
        let k = SketchPlan::rank_for(n, n, 0.03);
        let s = split_rank_k(&m, k).unwrap();
        let ratio = m.max_abs() / s.residual.max_abs();
        assert!(ratio >= 10.0, "range ratio {ratio}");
    }

    #[test]
    fn randomized_exact_on_rank_k() {
        let u = random_orthonormal(40, 3, 1);
        let v = random_orthonormal(30, 3, 2);
        let m = low_rank_product(&u, &[5.0, 2.0, 0.7], &v);
        let plan = SketchPlan::new(3).with_seed(9);
        let r = randomized_split(&m, &plan).unwrap();
        let e = split_rank_k(&m, 3).unwrap();
        assert!(r.residual.frobenius_norm() / m.frobenius_norm() < 1e-8);
        for (a, b) in r.values.iter().zip(&e.values) {
            assert!((a - b).abs() < 1e-9);
        }
        // same sign convention, so factors agree directly
        assert!(r.left.relative_error(&e.left).unwrap() < 1e-6);
        assert!(orthonormal_err(&r.left) < 1e-6 && orthonormal_err(&r.right) < 1e-6);
    }

    #[test]
    fn randomized_errors() {
        let m = gaussian_matrix(10, 6, 1.0, 0);
        assert!(matches!(
            randomized_split(&m, &SketchPlan::new(2)),
            Err(Error::SketchTooWide { .. })
        ));
        assert!(randomized_split(&m, &SketchPlan::new(0)).is_err());
        assert!(randomized_split(&m, &SketchPlan::new(2).with_oversample(0).with_sample_ratio(0.0)).is_err());
    }

    #[test]
    fn randomized_on_isotropic_leaves_expected_energy() {
        // Monte Carlo over seeds: residual energy fraction vs 1 - k/min(m,n)
        let (rows, cols, k) = (120, 80, 8);
        let mut frac = 0.0;
        let trials = 5;
        for t in 0..trials {
            let m = gaussian_matrix(rows, cols, 1.0, 100 + t);
            let r = randomized_split(&m, &SketchPlan::new(k).with_seed(t)).unwrap();
            frac += (r.residual.frobenius_norm() / m.frobenius_norm()).powi(2);
        }
        frac /= trials as f64;
        // exact top-k residual fraction for these Gaussian draws is about 0.73
        let exact: f64 = (0..trials)
            .map(|t| {
                let m = gaussian_matrix(rows, cols, 1.0, 100 + t);
                (split_rank_k(&m, k).unwrap().residual.frobenius_norm() / m.frobenius_norm()).powi(2)
            })
            .sum::<f64>()
            / trials as f64;
        let no_capture = 1.0 - k as f64 / cols as f64;
        assert!(frac >= exact - 1e-12 && frac <= no_capture, "{frac} vs [{exact}, {no_capture}]");
    }

    #[test]
    fn randomized_never_beats_exact() {
        let spectrum: Vec<f64> = (0..60).map(|i| 50.0 * 0.8f64.powi(i)).collect();
        let m = planted_matrix(90, 60, &spectrum, 5);
        for seed in 0..5 {
            let k = 6;
            let exact = split_rank_k(&m, k).unwrap().residual.frobenius_norm();
            let approx = randomized_split(&m, &SketchPlan::new(k).with_seed(seed)).unwrap().residual.frobenius_norm();
            assert!(approx >= exact * (1.0 - 1e-12));
            assert!(approx <= 2.0 * exact);
        }
    }

    #[test]
    fn project_split_keeps_invariants() {
        let spectrum: Vec<f64> = (0..40).map(|i| if i < 4 { 30.0 / (i + 1) as f64 } else { 0.1 }).collect();
        let x = planted_matrix(200, 40, &spectrum, 6);
        let basis = sampled_subspace(&x, &SketchPlan::new(4).with_seed(3).with_sample_ratio(0.1), 4).unwrap();
        let s = project_split(&x, &basis).unwrap();
        assert_eq!(s.rank(), 4);
        assert!(orthonormal_err(&s.left) < 1e-6 && orthonormal_err(&s.right) < 1e-6);
        assert!(s.values.windows(2).all(|w| w[0] >= w[1]) && s.values.iter().all(|&v| v > 0.0));
        assert!(s.reconstruct().relative_error(&x).unwrap() < 1e-12);
    }

    #[test]
    fn full_ratio_sampling_matches_full_randomized() {
        let spectrum: Vec<f64> = (0..32).map(|i| 10.0 * 0.6f64.powi(i)).collect();
        let x = planted_matrix(128, 32, &spectrum, 2);
        let plan = SketchPlan::new(3).with_seed(4).with_sample_ratio(1.0);
        let sampled = sampled_subspace(&x, &plan, 8).unwrap();
        let full = randomized_split(&x, &plan).unwrap().right;
        assert!(subspace_alignment(&sampled, &full).unwrap() >= 0.999);
    }

    #[test]
    fn sampling_picks_at_least_sketch_width() {
        let plan = SketchPlan::new(2).with_sample_ratio(0.01);
        let seqs = sample_sequences(1000, 1, &plan).unwrap();
        assert_eq!(seqs.len(), 10);
        let seqs = sample_sequences(1000, 4, &plan).unwrap();
        assert_eq!(seqs.len(), 3);
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_sequences(0, 4, &plan).is_err());
    }

    #[test]
    fn elbow_examples() {
        let e = elbow_fraction(&[10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(e.index, 3);
        assert!((e.fraction - 0.3).abs() < 1e-12);
        assert!(!e.degenerate);

        let geometric: Vec<f64> = (0..20).map(|i| 2f64.powi(-i)).collect();
        let g = elbow_fraction(&geometric).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.index, 2);

        let flat = elbow_fraction(&[1.0; 8]).unwrap();
        assert!(flat.degenerate);

        assert!(elbow_fraction(&[1.0, 0.5]).is_err());
        assert!(elbow_fraction(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn elbow_of_three_percent_dominant_spectrum() {
        // a dominant head decaying over a few indices onto a slow bulk
        let r = 400;
        let sigma: Vec<f64> = (0..r)
            .map(|i| {
                let x = i as f64;
                (-x / r as f64).exp() + 100.0 * (-x / 1.5).exp()
            })
            .collect();
        let e = elbow_fraction(&sigma).unwrap();
        assert!((0.02..=0.05).contains(&e.fraction), "{e:?}");
    }

    #[test]
    fn alignment_examples() {
        let a = random_orthonormal(20, 4, 1);
        assert!((subspace_alignment(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let e = DenseMatrix::identity(6);
        let first = e.columns(0..3);
        let second = e.columns(3..6);
        assert!(subspace_alignment(&first, &second).unwrap() < 1e-15);
        let rot = random_orthonormal(4, 4, 2);
        let rotated = a.matmul(&rot).unwrap();
        assert!((subspace_alignment(&a, &rotated).unwrap() - 1.0).abs() < 1e-12);
        let b = random_orthonormal(20, 4, 3);
        let ab = subspace_alignment(&a, &b).unwrap();
        assert!((ab - subspace_alignment(&b, &a).unwrap()).abs() < 1e-12);
        assert!(subspace_alignment(&a, &random_orthonormal(21, 4, 0)).is_err());
        // non-orthonormal input is repaired
        let scaled = a.scale(3.0);
        assert!((subspace_alignment(&scaled, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distortion_examples() {
        let m = gaussian_matrix(12, 10, 1.0, 7);
        let same = spectral_distortion(&m, &m, 5).unwrap();
        assert!(same.components.iter().all(|c| c.value_rel_error < 1e-12 && (c.vector_cosine - 1.0).abs() < 1e-12));
        let doubled = spectral_distortion(&m, &m.scale(2.0), 5).unwrap();
        assert!(doubled.components.iter().all(|c| (c.value_rel_error - 1.0).abs() < 1e-12 && (c.vector_cosine - 1.0).abs() < 1e-12));
        let rank_two = low_rank_product(&random_orthonormal(12, 2, 1), &[3.0, 1.0], &random_orthonormal(10, 2, 2));
        let d = spectral_distortion(&rank_two, &rank_two, 4).unwrap();
        assert_eq!(d.components.len(), 2);
        assert_eq!(d.skipped, vec![2, 3]);
        assert!(spectral_distortion(&m, &m, 11).is_err());
    }

    #[test]
    fn distortion_skips_zero_values() {
        let mut m = DenseMatrix::zeros(4, 4);
        m.set(0, 0, 2.0);
        let d = spectral_distortion(&m, &m, 3).unwrap();
        assert_eq!(d.components.len(), 1);
        assert_eq!(d.skipped, vec![1, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn elbow_scale_invariant(vals in proptest::collection::vec(0.01f64..100.0, 3..40), c in 0.001f64..1000.0) {
                let mut sigma = vals.clone();
                sigma.sort_by(|a, b| b.total_cmp(a));
                let a = elbow_fraction(&sigma).unwrap();
                let scaled: Vec<f64> = sigma.iter().map(|s| s * c).collect();
                let b = elbow_fraction(&scaled).unwrap();
                prop_assert_eq!(a.index, b.index);
            }

            #[test]
            fn alignment_symmetric_and_rotation_invariant(seed in any::<u64>()) {
                let a = random_orthonormal(15, 3, seed);
                let b = random_orthonormal(15, 3, seed.wrapping_add(1));
                let q = random_orthonormal(3, 3, seed.wrapping_add(2));
                let ab = subspace_alignment(&a, &b).unwrap();
                prop_assert!((ab - subspace_alignment(&b, &a).unwrap()).abs() < 1e-10);
                prop_assert!((ab - subspace_alignment(&a.matmul(&q).unwrap(), &b).unwrap()).abs() < 1e-10);
                prop_assert!((0.0..=1.0).contains(&ab));
            }
        }
    }
}
