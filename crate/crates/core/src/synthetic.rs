//! Seeded generators for test and benchmark matrices.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::matrix::DenseMatrix;
use crate::spectral::low_rank_product;

/// i.i.d. N(0, std²) entries.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
}

/// `n x k` matrix with orthonormal columns, Haar-distributed up to signs.
pub fn random_orthonormal(n: usize, k: usize, seed: u64) -> DenseMatrix {
    assert!(k <= n, "cannot fit {k} orthonormal columns in R^{n}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    DenseMatrix::from_nalgebra(&q.columns(0, k).into_owned())
}

/// `U diag(spectrum) Vᵀ` with random orthonormal `U`, `V`; the spectrum is
/// truncated to `min(rows, cols)`.
pub fn planted_matrix(rows: usize, cols: usize, spectrum: &[f64], seed: u64) -> DenseMatrix {
    let r = spectrum.len().min(rows).min(cols);
    let u = random_orthonormal(rows, r, seed);
    let v = random_orthonormal(cols, r, seed.wrapping_add(0x9e37_79b9));
    low_rank_product(&u, &spectrum[..r], &v)
}

/// `n x k` orthonormal columns where each of the first `localized` columns
/// lives on its own random set of `support` coordinates (outlier channels);
/// the remaining columns are Haar-random in the orthogonal complement.
pub fn channel_localized_orthonormal(n: usize, k: usize, localized: usize, support: usize, seed: u64) -> DenseMatrix {
    assert!(k <= n && localized <= k, "cannot fit {k} orthonormal columns in R^{n}");
    assert!(localized * support <= n, "supports of {localized} x {support} exceed {n} coordinates");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels: Vec<usize> = (0..n).collect();
    channels.shuffle(&mut rng);
    let mut q = DMatrix::<f64>::zeros(n, k);
    for j in 0..localized {
        for &c in &channels[j * support..(j + 1) * support] {
            q[(c, j)] = StandardNormal.sample(&mut rng);
        }
        let norm = q.column(j).norm();
        q.column_mut(j).unscale_mut(norm);
    }
    for j in localized..k {
        let mut g = nalgebra::DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        // two Gram-Schmidt passes keep the complement orthogonal to working precision
        for _ in 0..2 {
            for i in 0..j {
                let d = q.column(i).dot(&g);
                g.axpy(-d, &q.column(i), 1.0);
            }
        }
        let norm = g.norm();
        q.set_column(j, &(g / norm));
    }
    DenseMatrix::from_nalgebra(&q)
}

/// Like [`planted_matrix`], but the top `localized` right singular vectors
/// are concentrated on `support` channels each, the coordinate structure of
/// outlier channels in transformer activations.
pub fn outlier_planted_matrix(
    rows: usize,
    cols: usize,
    spectrum: &[f64],
    localized: usize,
    support: usize,
    seed: u64,
) -> DenseMatrix {
    let r = spectrum.len().min(rows).min(cols);
    let u = random_orthonormal(rows, r, seed);
    let v = channel_localized_orthonormal(cols, r, localized.min(r), support, seed.wrapping_add(0x9e37_79b9));
    low_rank_product(&u, &spectrum[..r], &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::svd_full;

    #[test]
    fn planted_spectrum_is_recovered() {
        let m = planted_matrix(30, 20, &[5.0, 3.0, 1.0], 4);
        let s = svd_full(&m).unwrap();
        for (a, b) in s.values.iter().zip([5.0, 3.0, 1.0]) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(s.values[3] < 1e-10);
    }

    #[test]
    fn orthonormal_columns() {
        let q = random_orthonormal(10, 4, 1);
        let g = q.transpose().matmul(&q).unwrap();
        assert!(g.relative_error(&DenseMatrix::identity(4)).unwrap() < 1e-12);
    }

    #[test]
    fn localized_columns_are_orthonormal_and_sparse() {
        let q = channel_localized_orthonormal(64, 10, 3, 4, 9);
        let g = q.transpose().matmul(&q).unwrap();
        assert!(g.relative_error(&DenseMatrix::identity(10)).unwrap() < 1e-12);
        for j in 0..3 {
            assert_eq!((0..64).filter(|&i| q.get(i, j) != 0.0).count(), 4);
        }
    }
}
