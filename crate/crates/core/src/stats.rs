//! Element-distribution summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-interpolated quantile `q ∈ [0, 1]` of finite values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    if let Some(bad) = sorted.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            value: *bad,
            context: "quantile".into(),
        });
    }
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Distance between the 10th and 90th percentiles.
pub fn inter_decile_range(values: &[f64]) -> Result<f64> {
    Ok(quantile(values, 0.9)? - quantile(values, 0.1)?)
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "histogram needs bins >= 1 and a finite range, got {bins} over [{lo}, {hi}]"
            )));
        }
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            if v < lo || v > hi {
                continue;
            }
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    /// Histogram spanning the sample's own range (a unit range around a constant sample).
    pub fn spanning(values: &[f64], bins: usize) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Self::new(values, bins, -0.5, 0.5);
        }
        if hi > lo {
            Self::new(values, bins, lo, hi)
        } else {
            Self::new(values, bins, lo - 0.5, hi + 0.5)
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 5.0);
        assert_eq!(quantile(&v, 0.125).unwrap(), 1.5);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&[1.0, f64::NAN], 0.5).is_err());
    }

    #[test]
    fn histogram_counts_every_in_range_value() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let h = Histogram::new(&v, 10, 0.0, 1.0).unwrap();
        assert_eq!(h.total(), 100);
        assert_eq!(h.counts, vec![10; 10]);
        assert_eq!(h.bin_edges().len(), 11);
        let c = Histogram::spanning(&[2.0, 2.0], 4).unwrap();
        assert_eq!(c.total(), 2);
    }
}
