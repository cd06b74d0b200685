//! Software emulation of the low-precision formats used for training:
//! BF16, FP8 E4M3 and FP4 E2M1, all projected from a 64-bit carrier.
//!
//! Every format is described by its stored mantissa width, its minimum
//! normal exponent and its largest finite magnitude. Rounding works on the
//! scaled significand `|x| / ulp(x)`, which is exact in `f64` because the ulp
//! is a power of two.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Representable FP4 E2M1 magnitudes, indexed by their 3-bit code.
pub const E2M1_MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
pub const E2M1_MAX: f64 = 6.0;
pub const E4M3_MAX: f64 = 448.0;
/// Smallest positive E4M3 value (subnormal, 2^-9).
pub const E4M3_MIN_POSITIVE: f64 = 1.0 / 512.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmulatedFormat {
    Bf16,
    Fp8E4M3,
    Fp4E2M1,
    Wide,
}

impl EmulatedFormat {
    pub fn tag(self) -> u8 {
        match self {
            EmulatedFormat::Wide => 0,
            EmulatedFormat::Bf16 => 1,
            EmulatedFormat::Fp8E4M3 => 2,
            EmulatedFormat::Fp4E2M1 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => EmulatedFormat::Wide,
            1 => EmulatedFormat::Bf16,
            2 => EmulatedFormat::Fp8E4M3,
            3 => EmulatedFormat::Fp4E2M1,
            other => return Err(Error::Format(format!("unknown format tag {other}"))),
        })
    }

    fn params(self) -> Option<FormatParams> {
        match self {
            EmulatedFormat::Bf16 => Some(FormatParams {
                mantissa_bits: 7,
                min_exponent: -126,
                max_finite: (2.0 - 1.0 / 128.0) * 2f64.powi(127),
            }),
            EmulatedFormat::Fp8E4M3 => Some(FormatParams {
                mantissa_bits: 3,
                min_exponent: -6,
                max_finite: E4M3_MAX,
            }),
            EmulatedFormat::Fp4E2M1 => Some(FormatParams {
                mantissa_bits: 1,
                min_exponent: 0,
                max_finite: E2M1_MAX,
            }),
            EmulatedFormat::Wide => None,
        }
    }

    /// Largest finite magnitude; `f64::MAX` for the wide carrier.
    pub fn max_finite(self) -> f64 {
        self.params().map_or(f64::MAX, |p| p.max_finite)
    }

    /// True when `x` lies exactly on this format's grid.
    pub fn is_representable(self, x: f64) -> bool {
        match self.params() {
            None => x.is_finite(),
            Some(p) => x.is_finite() && p.round(x, RoundingMode::NearestEven, 0.0) == x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    NearestEven,
    StochasticRound,
    /// Smallest representable magnitude `>= |x|`, saturating at the format max.
    RoundUpMagnitude,
}

impl RoundingMode {
    pub fn tag(self) -> u8 {
        match self {
            RoundingMode::NearestEven => 0,
            RoundingMode::StochasticRound => 1,
            RoundingMode::RoundUpMagnitude => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => RoundingMode::NearestEven,
            1 => RoundingMode::StochasticRound,
            2 => RoundingMode::RoundUpMagnitude,
            other => return Err(Error::Format(format!("unknown rounding tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct FormatParams {
    mantissa_bits: i32,
    min_exponent: i32,
    max_finite: f64,
}

impl FormatParams {
    /// `uniform` is only read for stochastic rounding and must lie in [0, 1).
    #[inline]
    fn round(&self, x: f64, mode: RoundingMode, uniform: f64) -> f64 {
        let mag = x.abs();
        if mag == 0.0 {
            return 0.0;
        }
        if mag >= self.max_finite {
            return self.max_finite.copysign(x);
        }
        let exponent = exponent_floor(mag).max(self.min_exponent);
        let ulp = pow2(exponent - self.mantissa_bits);
        let scaled = mag / ulp;
        let steps = match mode {
            RoundingMode::NearestEven => scaled.round_ties_even(),
            RoundingMode::RoundUpMagnitude => scaled.ceil(),
            RoundingMode::StochasticRound => {
                let lower = scaled.floor();
                if uniform < scaled - lower {
                    lower + 1.0
                } else {
                    lower
                }
            }
        };
        (steps * ulp).min(self.max_finite).copysign(x)
    }
}

/// floor(log2(x)) for positive finite `x`; f64 subnormals report -1023,
/// below every emulated format's exponent range.
#[inline]
fn exponent_floor(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

#[inline]
fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Maps a raw 64-bit draw onto [0, 1) with 53 bits of resolution.
#[inline]
pub(crate) fn unit_uniform(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Round a single wide value onto `fmt`.
///
/// Stochastic rounding draws from `rng`, which must be supplied for that mode.
pub fn round_to_format(
    x: f64,
    fmt: EmulatedFormat,
    mode: RoundingMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            value: x,
            context: "round_to_format".into(),
        });
    }
    let params = fmt
        .params()
        .ok_or_else(|| Error::InvalidArgument("cannot round to the wide carrier".into()))?;
    let uniform = match mode {
        RoundingMode::StochasticRound => {
            let rng = rng.ok_or_else(|| {
                Error::InvalidArgument("stochastic rounding requires an RNG".into())
            })?;
            unit_uniform(rng.next_u64())
        }
        _ => 0.0,
    };
    Ok(params.round(x, mode, uniform))
}

/// Infallible rounding for already-validated finite input.
#[inline]
pub(crate) fn round_finite(x: f64, fmt: EmulatedFormat, mode: RoundingMode, uniform: f64) -> f64 {
    match fmt.params() {
        Some(p) => p.round(x, mode, uniform),
        None => x,
    }
}

#[inline]
pub(crate) fn round_bf16(x: f64) -> f64 {
    round_finite(x, EmulatedFormat::Bf16, RoundingMode::NearestEven, 0.0)
}

/// Elementwise cast of a matrix onto `fmt`.
///
/// Casting to [`EmulatedFormat::Wide`] only retags the matrix.
pub fn cast_matrix(
    m: &DenseMatrix,
    fmt: EmulatedFormat,
    mode: RoundingMode,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<DenseMatrix> {
    if fmt == EmulatedFormat::Wide {
        let mut out = m.clone();
        out.set_format(EmulatedFormat::Wide);
        return Ok(out);
    }
    let mut data = Vec::with_capacity(m.data().len());
    for &v in m.data() {
        let r = match rng {
            Some(ref mut r) => Some(&mut **r as &mut dyn RngCore),
            None => None,
        };
        data.push(round_to_format(v, fmt, mode, r)?);
    }
    let mut out = DenseMatrix::from_vec(m.rows(), m.cols(), data)?;
    out.set_format(fmt);
    Ok(out)
}

/// 3-bit magnitude code plus sign bit (bit 3) for an E2M1 value.
pub fn e2m1_encode(v: f64) -> Result<u8> {
    let mag = v.abs();
    let idx = E2M1_MAGNITUDES
        .iter()
        .position(|&m| m == mag)
        .ok_or_else(|| Error::Format(format!("{v} is not an E2M1 value")))?;
    let sign = if v.is_sign_negative() && mag != 0.0 { 0x8 } else { 0 };
    Ok(sign | idx as u8)
}

pub fn e2m1_decode(code: u8) -> f64 {
    let mag = E2M1_MAGNITUDES[(code & 0x7) as usize];
    if code & 0x8 != 0 {
        -mag
    } else {
        mag
    }
}

/// E4M3 (the "fn" variant: no infinities, 0x7F/0xFF are NaN) bit pattern.
pub fn e4m3_encode(v: f64) -> Result<u8> {
    if !EmulatedFormat::Fp8E4M3.is_representable(v) {
        return Err(Error::Format(format!("{v} is not an E4M3 value")));
    }
    let sign = if v.is_sign_negative() && v != 0.0 { 0x80 } else { 0 };
    let mag = v.abs();
    if mag == 0.0 {
        return Ok(sign);
    }
    let e = exponent_floor(mag);
    let bits = if e < -6 {
        (mag / E4M3_MIN_POSITIVE) as u8
    } else {
        let mant = ((mag / pow2(e) - 1.0) * 8.0) as u8;
        (((e + 7) as u8) << 3) | mant
    };
    Ok(sign | bits)
}

pub fn e4m3_decode(bits: u8) -> f64 {
    let exp = ((bits >> 3) & 0xf) as i32;
    let mant = (bits & 0x7) as f64;
    let mag = if exp == 0 {
        mant * E4M3_MIN_POSITIVE
    } else if exp == 15 && bits & 0x7 == 7 {
        f64::NAN
    } else {
        (1.0 + mant / 8.0) * pow2(exp - 7)
    };
    if bits & 0x80 != 0 {
        -mag
    } else {
        mag
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rtn(x: f64, fmt: EmulatedFormat) -> f64 {
        round_to_format(x, fmt, RoundingMode::NearestEven, None).unwrap()
    }

    /// Brute-force nearest neighbour over the signed E2M1 set, ties to the
    /// value with an even mantissa bit (even code index).
    fn nearest_e2m1(x: f64) -> f64 {
        let mut best = 0usize;
        for (i, &m) in E2M1_MAGNITUDES.iter().enumerate() {
            let d = (x.abs() - m).abs();
            let bd = (x.abs() - E2M1_MAGNITUDES[best]).abs();
            if d < bd || (d == bd && i % 2 == 0) {
                best = i;
            }
        }
        E2M1_MAGNITUDES[best].copysign(x)
    }

    #[test]
    fn e2m1_examples() {
        assert_eq!(rtn(6.0, EmulatedFormat::Fp4E2M1), 6.0);
        assert_eq!(rtn(2.4, EmulatedFormat::Fp4E2M1), 2.0);
        assert_eq!(rtn(2.6, EmulatedFormat::Fp4E2M1), 3.0);
        assert_eq!(rtn(-2.6, EmulatedFormat::Fp4E2M1), -3.0);
        // ties: 2.5 sits between 2 (even) and 3 (odd mantissa)
        assert_eq!(rtn(2.5, EmulatedFormat::Fp4E2M1), 2.0);
        assert_eq!(rtn(0.75, EmulatedFormat::Fp4E2M1), 1.0);
        assert_eq!(rtn(0.25, EmulatedFormat::Fp4E2M1), 0.0);
        assert_eq!(rtn(100.0, EmulatedFormat::Fp4E2M1), 6.0);
    }

    #[test]
    fn e2m1_matches_brute_force_sweep() {
        let mut x = -8.0;
        while x <= 8.0 {
            assert_eq!(rtn(x, EmulatedFormat::Fp4E2M1), nearest_e2m1(x).clamp(-6.0, 6.0), "{x}");
            x += 1.0 / 64.0 + 1e-4;
        }
    }

    #[test]
    fn e2m1_stochastic_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let mut ups = 0;
        for _ in 0..n {
            let v = round_to_format(
                0.25,
                EmulatedFormat::Fp4E2M1,
                RoundingMode::StochasticRound,
                Some(&mut rng),
            )
            .unwrap();
            assert!(v == 0.0 || v == 0.5);
            if v == 0.5 {
                ups += 1;
            }
        }
        let p = ups as f64 / n as f64;
        assert!((p - 0.5).abs() < 4.0 * (0.25f64 / n as f64).sqrt(), "{p}");
    }

    #[test]
    fn bf16_matches_f32_bit_truncation_reference() {
        // Independent reference: round an f32 to bf16 via the usual bit trick.
        fn bf16_ref(x: f32) -> f32 {
            let bits = x.to_bits();
            let lsb = (bits >> 16) & 1;
            let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
            f32::from_bits(rounded)
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = (rng.next_u32() as f32 / u32::MAX as f32 - 0.5) * 1e3;
            assert_eq!(rtn(x as f64, EmulatedFormat::Bf16), bf16_ref(x) as f64, "{x}");
        }
    }

    #[test]
    fn e4m3_grid_and_saturation() {
        assert_eq!(rtn(448.0, EmulatedFormat::Fp8E4M3), 448.0);
        assert_eq!(rtn(1000.0, EmulatedFormat::Fp8E4M3), 448.0);
        assert_eq!(rtn(1.0 / 512.0, EmulatedFormat::Fp8E4M3), 1.0 / 512.0);
        let up = |x| round_to_format(x, EmulatedFormat::Fp8E4M3, RoundingMode::RoundUpMagnitude, None).unwrap();
        assert_eq!(up(2.0), 2.0);
        assert_eq!(up(2.01), 2.25);
        assert_eq!(up(1e-6), 1.0 / 512.0);
        assert_eq!(up(500.0), 448.0);
        assert_eq!(up(-2.01), -2.25);
    }

    #[test]
    fn e4m3_bits_roundtrip_all_codes() {
        for bits in 0u8..=255 {
            let v = e4m3_decode(bits);
            if v.is_nan() {
                continue;
            }
            let back = e4m3_encode(v).unwrap();
            if v == 0.0 {
                assert_eq!(e4m3_decode(back), 0.0);
            } else {
                assert_eq!(back, bits, "{v}");
            }
        }
        assert_eq!(e4m3_decode(0x7e), 448.0);
    }

    #[test]
    fn e2m1_codes_roundtrip() {
        for code in 0u8..16 {
            let v = e2m1_decode(code);
            let back = e2m1_encode(v).unwrap();
            assert_eq!(e2m1_decode(back), v);
        }
        assert_eq!(e2m1_encode(-6.0).unwrap(), 0xf);
    }

    #[test]
    fn errors() {
        assert!(round_to_format(f64::NAN, EmulatedFormat::Bf16, RoundingMode::NearestEven, None).is_err());
        assert!(round_to_format(1.0, EmulatedFormat::Fp4E2M1, RoundingMode::StochasticRound, None).is_err());
        assert!(round_to_format(1.0, EmulatedFormat::Wide, RoundingMode::NearestEven, None).is_err());
    }

    #[test]
    fn cast_examples() {
        let m = DenseMatrix::from_rows(&[vec![2.4, 2.6]]).unwrap();
        let c = cast_matrix(&m, EmulatedFormat::Fp4E2M1, RoundingMode::NearestEven, None).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0]);
        assert_eq!(c.format(), EmulatedFormat::Fp4E2M1);

        let z = DenseMatrix::zeros(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cz = cast_matrix(&z, EmulatedFormat::Fp4E2M1, RoundingMode::StochasticRound, Some(&mut rng)).unwrap();
        assert!(cz.data().iter().all(|&v| v == 0.0));

        let b = cast_matrix(&DenseMatrix::from_fn(3, 3, |i, j| (i as f64 + 0.1) / (j as f64 + 1.7)), EmulatedFormat::Bf16, RoundingMode::NearestEven, None).unwrap();
        let bb = cast_matrix(&b, EmulatedFormat::Bf16, RoundingMode::NearestEven, None).unwrap();
        assert_eq!(b.data(), bb.data());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn formats() -> impl Strategy<Value = EmulatedFormat> {
            prop_oneof![
                Just(EmulatedFormat::Bf16),
                Just(EmulatedFormat::Fp8E4M3),
                Just(EmulatedFormat::Fp4E2M1)
            ]
        }

        proptest! {
            #[test]
            fn idempotent(x in -1e4f64..1e4, fmt in formats()) {
                let once = rtn(x, fmt);
                prop_assert_eq!(rtn(once, fmt), once);
                prop_assert!(fmt.is_representable(once));
            }

            #[test]
            fn monotone(a in -500f64..500.0, b in -500f64..500.0, fmt in formats()) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(rtn(lo, fmt) <= rtn(hi, fmt));
            }

            #[test]
            fn round_up_covers(x in -1e3f64..1e3, fmt in formats()) {
                let r = round_to_format(x, fmt, RoundingMode::RoundUpMagnitude, None).unwrap();
                prop_assert!(r.abs() >= x.abs() || r.abs() == fmt.max_finite());
                prop_assert!(fmt.is_representable(r));
            }

            #[test]
            fn stochastic_hits_a_neighbour(x in -6f64..6.0, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r = round_to_format(x, EmulatedFormat::Fp4E2M1, RoundingMode::StochasticRound, Some(&mut rng)).unwrap();
                let down = E2M1_MAGNITUDES.iter().rev().find(|&&m| m <= x.abs()).unwrap();
                let up = E2M1_MAGNITUDES.iter().find(|&&m| m >= x.abs()).unwrap();
                prop_assert!(r.abs() == *down || r.abs() == *up);
            }
        }
    }
}
