use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specquant::precision::{e4m3_decode, e4m3_encode, E4M3_MAX, E4M3_MIN_POSITIVE};
use specquant::{round_to_format, EmulatedFormat, RoundingMode};

/// BF16 nearest-even via the bit pattern of the f32 value; valid for values
/// already exact in f32.
fn bf16_oracle(x: f32) -> f32 {
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
    f32::from_bits(rounded)
}

/// Every finite E4M3 value enumerated from its bit layout.
fn e4m3_grid() -> Vec<f64> {
    let mut v = Vec::new();
    for e in 0..16i32 {
        for m in 0..8 {
            if e == 15 && m == 7 {
                continue; // NaN
            }
            let mag = if e == 0 {
                m as f64 / 8.0 * 2f64.powi(-6)
            } else {
                (1.0 + m as f64 / 8.0) * 2f64.powi(e - 7)
            };
            v.push(mag);
        }
    }
    v
}

fn nearest(grid: &[f64], x: f64) -> f64 {
    let mut best = grid[0];
    for &g in grid {
        let (d, db) = ((x.abs() - g).abs(), (x.abs() - best).abs());
        if d < db {
            best = g;
        }
    }
    best.copysign(x)
}

#[test]
fn e4m3_limits() {
    let grid = e4m3_grid();
    assert_eq!(grid.iter().copied().fold(0.0, f64::max), E4M3_MAX);
    assert_eq!(grid[1], E4M3_MIN_POSITIVE);
    for &g in &grid {
        assert!(EmulatedFormat::Fp8E4M3.is_representable(g));
        assert_eq!(e4m3_decode(e4m3_encode(g).unwrap()), g);
    }
}

#[test]
fn e4m3_round_up_is_ceiling_on_grid() {
    let grid = e4m3_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20_000 {
        let x: f64 = rand::Rng::random_range(&mut rng, 0.0..440.0);
        let want = grid.iter().copied().find(|&g| g >= x).unwrap();
        let got = round_to_format(x, EmulatedFormat::Fp8E4M3, RoundingMode::RoundUpMagnitude, None).unwrap();
        assert_eq!(got, want, "{x}");
    }
}

proptest! {
    #[test]
    fn bf16_matches_bit_oracle(x in -1e30f32..1e30f32) {
        let got = round_to_format(x as f64, EmulatedFormat::Bf16, RoundingMode::NearestEven, None).unwrap();
        prop_assert_eq!(got, bf16_oracle(x) as f64);
    }

    #[test]
    fn e4m3_nearest_matches_grid(x in -448f64..448.0) {
        let got = round_to_format(x, EmulatedFormat::Fp8E4M3, RoundingMode::NearestEven, None).unwrap();
        let want = nearest(&e4m3_grid(), x);
        // ties may go either way in the scan; nearest-even resolves them
        prop_assert!((got.abs() - x.abs()).abs() <= (want.abs() - x.abs()).abs() + 1e-300);
    }

    #[test]
    fn e2m1_nearest_matches_grid(x in -6f64..6.0) {
        let grid = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
        let got = round_to_format(x, EmulatedFormat::Fp4E2M1, RoundingMode::NearestEven, None).unwrap();
        let want = nearest(&grid, x);
        prop_assert!((got.abs() - x.abs()).abs() <= (want.abs() - x.abs()).abs());
    }

    #[test]
    fn saturates_beyond_range(x in 7f64..1e6) {
        let fp4 = round_to_format(x, EmulatedFormat::Fp4E2M1, RoundingMode::NearestEven, None).unwrap();
        prop_assert_eq!(fp4, 6.0);
        let fp4 = round_to_format(-x, EmulatedFormat::Fp4E2M1, RoundingMode::RoundUpMagnitude, None).unwrap();
        prop_assert_eq!(fp4, -6.0);
    }
}

#[test]
fn ties_go_to_even() {
    let r = |x| round_to_format(x, EmulatedFormat::Fp4E2M1, RoundingMode::NearestEven, None).unwrap();
    assert_eq!(r(0.25), 0.0);
    assert_eq!(r(0.75), 1.0);
    assert_eq!(r(2.5), 2.0);
    assert_eq!(r(5.0), 4.0);
    assert_eq!(r(-1.25), -1.0);
}

#[test]
fn stochastic_requires_rng_and_rejects_nan() {
    assert!(round_to_format(1.2, EmulatedFormat::Fp4E2M1, RoundingMode::StochasticRound, None).is_err());
    assert!(round_to_format(f64::NAN, EmulatedFormat::Bf16, RoundingMode::NearestEven, None).is_err());
    assert!(round_to_format(1.0, EmulatedFormat::Wide, RoundingMode::NearestEven, None).is_err());
}
