use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use specquant::fp4::{fake_quantize, RngStream};
use specquant::spectral::*;
use specquant::synthetic::{gaussian_matrix, planted_matrix, random_orthonormal};
use specquant::{DenseMatrix, RoundingMode};

fn gram_defect(b: &DenseMatrix) -> f64 {
    let g = b.transpose().matmul(b).unwrap();
    g.sub(&DenseMatrix::identity(b.cols())).unwrap().max_abs()
}

fn top_right(m: &DenseMatrix, k: usize) -> DenseMatrix {
    svd_full(m).unwrap().right.columns(0..k)
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    let m = gaussian_matrix(50, 20, 1.0, 17);
    let svd = svd_full(&m).unwrap();
    let eig = SymmetricEigen::new(m.transpose().matmul(&m).unwrap().to_nalgebra());
    let mut ev: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for (a, b) in svd.values.iter().zip(&ev) {
        assert!((a - b).abs() < 1e-8);
    }
    let back = low_rank_product(&svd.left, &svd.values, &svd.right);
    assert!(back.relative_error(&m).unwrap() < 1e-10);
}

#[test]
fn largest_left_entry_is_positive() {
    let svd = svd_full(&gaussian_matrix(12, 9, 1.0, 4)).unwrap();
    for j in 0..svd.values.len() {
        let col = svd.left.column(j);
        let big = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        assert!(big > 0.0);
    }
}

#[test]
fn anisotropic_residual_is_orders_narrower() {
    let spectrum: Vec<f64> = (0..200).map(|i| 100.0 * 0.5f64.powi(i) + 0.01).collect();
    let m = planted_matrix(400, 200, &spectrum, 2);
    let k = (0.03 * 200.0f64).ceil() as usize;
    let s = split_rank_k(&m, k).unwrap();
    let ratio = m.max_abs() / s.residual.max_abs();
    assert!((10.0..=1000.0).contains(&ratio) || ratio > 10.0, "{ratio}");
    assert!(split_rank_k(&m, 0).is_err() || split_rank_k(&m, 0).unwrap().rank() == 0);
    assert!(split_rank_k(&m, 201).is_err());
}

#[test]
fn randomized_recovers_decaying_top_32() {
    let spectrum: Vec<f64> = (0..120).map(|i| if i < 32 { 100.0 * 0.97f64.powi(i) } else { 10.0 * 0.9f64.powi(i - 32) }).collect();
    let m = planted_matrix(300, 120, &spectrum, 5);
    let plan = SketchPlan::new(32).with_oversample(8).with_seed(1);
    let s = randomized_split(&m, &plan).unwrap();
    assert!(subspace_alignment(&s.right, &top_right(&m, 32)).unwrap() >= 0.99);
    assert!(gram_defect(&s.left) < 1e-6 && gram_defect(&s.right) < 1e-6);
    assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
    assert!(s.reconstruct().relative_error(&m).unwrap() < 1e-10);
}

#[test]
fn randomized_is_near_optimal_with_a_gap() {
    for seed in 0..5 {
        let spectrum: Vec<f64> = (0..40).map(|i| if i < 6 { 40.0 - i as f64 } else { 8.0 * 0.9f64.powi(i) }).collect();
        let m = planted_matrix(90, 40, &spectrum, seed);
        let exact = split_rank_k(&m, 6).unwrap().residual.frobenius_norm();
        let approx = randomized_split(&m, &SketchPlan::new(6).with_seed(seed)).unwrap().residual.frobenius_norm();
        assert!(approx >= exact * (1.0 - 1e-12));
        assert!(approx <= 2.0 * exact, "{approx} vs {exact}");
    }
}

#[test]
fn isotropic_residual_energy_follows_dimension_count() {
    let (rows, cols, k) = (400, 100, 5);
    let mut ratios = Vec::new();
    for seed in 0..8 {
        let m = gaussian_matrix(rows, cols, 1.0, seed);
        let s = randomized_split(&m, &SketchPlan::new(k).with_seed(seed)).unwrap();
        ratios.push((s.residual.frobenius_norm() / m.frobenius_norm()).powi(2));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let expected = 1.0 - k as f64 / cols as f64;
    assert!((mean - expected).abs() < 0.1 * expected, "{mean} vs {expected}");
}

fn planted_activations(sequences: usize, seq_len: usize, m: usize, k: usize, seed: u64) -> DenseMatrix {
    // k dominant directions 20x above an isotropic floor
    let basis = random_orthonormal(m, k, seed);
    let z = gaussian_matrix(sequences * seq_len, k, 20.0, seed + 1);
    z.matmul(&basis.transpose()).unwrap().add(&gaussian_matrix(sequences * seq_len, m, 1.0, seed + 2)).unwrap()
}

#[test]
fn one_percent_sampling_keeps_the_dominant_subspace() {
    let (seq_len, m, k) = (32, 64, 4);
    let mut scores = Vec::new();
    for seed in 0..10 {
        let x = planted_activations(400, seq_len, m, k, 100 * seed);
        let plan = SketchPlan::new(k).with_sample_ratio(0.01).with_seed(seed);
        let basis = sampled_subspace(&x, &plan, seq_len).unwrap();
        scores.push(subspace_alignment(&basis, &top_right(&x, k)).unwrap());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(mean >= 0.9, "{scores:?}");
}

#[test]
fn full_ratio_sampling_matches_full_batch() {
    let x = planted_activations(20, 16, 48, 3, 9);
    let plan = SketchPlan::new(3).with_sample_ratio(1.0).with_seed(4);
    let sampled = sampled_subspace(&x, &plan, 16).unwrap();
    let full = randomized_split(&x, &plan).unwrap().right;
    assert!(subspace_alignment(&sampled, &full).unwrap() >= 0.999);
}

#[test]
fn isotropic_sampling_is_no_better_than_chance() {
    let (seq_len, m, k, trials) = (32, 64, 4, 30);
    let mut sampled = Vec::new();
    let mut null = Vec::new();
    for t in 0..trials {
        let x = gaussian_matrix(100 * seq_len, m, 1.0, 7000 + t);
        let exact = top_right(&x, k);
        let plan = SketchPlan::new(k).with_sample_ratio(0.01).with_seed(t);
        sampled.push(subspace_alignment(&sampled_subspace(&x, &plan, seq_len).unwrap(), &exact).unwrap());
        null.push(subspace_alignment(&random_orthonormal(m, k, 9000 + t), &exact).unwrap());
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, var / v.len() as f64)
    };
    let ((ms, _), (mn, vn)) = (stats(&sampled), stats(&null));
    let chance = k as f64 / m as f64;
    assert!((mn - chance).abs() < 4.0 * vn.sqrt(), "null {mn} vs {chance}");
    // the sampled rows are part of the batch, which tilts the full-batch
    // top-k slightly toward them; the lift over chance stays small
    assert!((ms - chance).abs() < 0.05, "sampled {ms} vs chance {chance}");
}

#[test]
fn plateau_and_dominant_elbows() {
    let e = elbow_fraction(&[10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(e.index, 3);
    assert!((e.fraction - 0.3).abs() < 1e-12);
    let r = 1000;
    let head = 30;
    let sigma: Vec<f64> = (0..r).map(|i| if i < head { 1000.0 * 0.9f64.powi(i as i32) } else { 5.0 * 0.999f64.powi(i as i32) }).collect();
    let f = elbow_fraction(&sigma).unwrap().fraction;
    assert!((0.02..=0.05).contains(&f), "{f}");
    let linear: Vec<f64> = (0..20).map(|i| 0.8f64.powi(i)).collect();
    assert!(elbow_fraction(&linear).unwrap().degenerate);
    assert!(elbow_fraction(&[1.0, 0.5]).is_err());
}

#[test]
fn quantization_distorts_small_components_more() {
    let spectrum: Vec<f64> = (0..64).map(|i| 100.0 * 0.85f64.powi(i)).collect();
    let m = planted_matrix(256, 64, &spectrum, 12);
    let q = fake_quantize(&m, 16, RoundingMode::NearestEven, RngStream::new(0, 0)).unwrap();
    let d = spectral_distortion(&m, &q, 32).unwrap();
    let err: Vec<f64> = d.components.iter().map(|c| c.value_rel_error + (1.0 - c.vector_cosine)).collect();
    let rho = spearman(&(0..err.len()).map(|i| i as f64).collect::<Vec<_>>(), &err);
    assert!(rho > 0.5, "{rho}");
}

#[test]
fn distortion_of_identity_and_scaling() {
    let m = gaussian_matrix(10, 6, 1.0, 1);
    let d = spectral_distortion(&m, &m, 6).unwrap();
    assert!(d.components.iter().all(|c| c.value_rel_error < 1e-12 && (c.vector_cosine - 1.0).abs() < 1e-12));
    let d = spectral_distortion(&m, &m.scale(2.0), 6).unwrap();
    assert!(d.components.iter().all(|c| (c.value_rel_error - 1.0).abs() < 1e-12 && (c.vector_cosine - 1.0).abs() < 1e-12));
    assert!(spectral_distortion(&m, &m, 7).is_err());
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(rows in 1usize..24, cols in 1usize..24, seed in any::<u64>()) {
        let m = gaussian_matrix(rows, cols, 3.0, seed);
        let s = svd_full(&m).unwrap();
        prop_assert!(low_rank_product(&s.left, &s.values, &s.right).relative_error(&m).unwrap() < 1e-10);
        prop_assert!(gram_defect(&s.left) < 1e-10 && gram_defect(&s.right) < 1e-10);
        prop_assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn split_residual_is_orthogonal(seed in any::<u64>(), k in 1usize..8) {
        let m = gaussian_matrix(20, 12, 1.0, seed);
        let s = split_rank_k(&m, k).unwrap();
        let inner = s.low_rank().dot(&s.residual).unwrap();
        prop_assert!(inner.abs() < 1e-8 * m.frobenius_norm().powi(2));
        prop_assert!(s.reconstruct().relative_error(&m).unwrap() < 1e-10);
    }

    #[test]
    fn alignment_is_symmetric_and_rotation_invariant(seed in any::<u64>(), k in 1usize..6) {
        let a = random_orthonormal(16, k, seed);
        let b = random_orthonormal(16, k, seed ^ 1);
        let rot = random_orthonormal(k, k, seed ^ 2);
        let ab = subspace_alignment(&a, &b).unwrap();
        prop_assert!((ab - subspace_alignment(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - subspace_alignment(&a.matmul(&rot).unwrap(), &b).unwrap()).abs() < 1e-10);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((subspace_alignment(&a, &a.matmul(&rot).unwrap()).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn elbow_ignores_positive_scaling(values in proptest::collection::vec(0.01f64..100.0, 3..40), c in 1e-3f64..1e3) {
        let mut sigma = values;
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let scaled: Vec<f64> = sigma.iter().map(|v| v * c).collect();
        let (a, b) = (elbow_fraction(&sigma).unwrap(), elbow_fraction(&scaled).unwrap());
        prop_assert_eq!(a.index, b.index);
        prop_assert!((a.max_curvature - b.max_curvature).abs() < 1e-6 * (1.0 + a.max_curvature));
    }
}
