use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{visit_slice, Report, Series};
use crate::matrix::DenseMatrix;
use crate::spectral::{elbow_fraction, low_rank_product, svd_full, Elbow};
use crate::stats::Histogram;

/// Component indices whose rank-1 terms are histogrammed.
pub const COMPONENT_INDICES: [usize; 4] = [0, 16, 128, 1024];
const BINS: usize = 64;
/// Values below this fraction of the largest are treated as numerically zero.
const ZERO_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentHistogram {
    pub index: usize,
    pub max_abs: f64,
    /// Binned over the full matrix's range.
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorAnalysis {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub spectrum: Vec<f64>,
    /// Absent when fewer than three nonzero singular values exist.
    pub elbow: Option<Elbow>,
    pub full_histogram: Histogram,
    pub components: Vec<ComponentHistogram>,
    pub residual_histogram: Histogram,
    pub full_range: f64,
    pub residual_range: f64,
    /// `full_range / residual_range`; absent when the residual is constant.
    pub range_ratio: Option<f64>,
}

fn range(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Spectrum, elbow and element distributions of `m` and of its residual
/// after removing the top `k` components.
pub fn analyze_tensor(m: &DenseMatrix, k: usize) -> Result<TensorAnalysis> {
    let svd = svd_full(m)?;
    let r = svd.values.len();
    if k > r {
        return Err(Error::RankOutOfRange { k, max: r });
    }
    let top = svd.values.first().copied().unwrap_or(0.0);
    let nonzero: Vec<f64> = svd.values.iter().copied().filter(|&s| s > top * ZERO_RATIO && s > 0.0).collect();
    let elbow = if nonzero.len() >= 3 {
        Some(elbow_fraction(&nonzero)?)
    } else {
        None
    };
    let full_histogram = Histogram::spanning(m.data(), BINS)?;
    let components = COMPONENT_INDICES
        .iter()
        .filter(|&&i| i < r)
        .map(|&i| {
            let comp = low_rank_product(
                &svd.left.columns(i..i + 1),
                &svd.values[i..i + 1],
                &svd.right.columns(i..i + 1),
            );
            Ok(ComponentHistogram {
                index: i,
                max_abs: comp.max_abs(),
                histogram: Histogram::new(
                    comp.data(),
                    BINS,
                    full_histogram.lo,
                    full_histogram.hi,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let low = low_rank_product(&svd.left.columns(0..k), &svd.values[..k], &svd.right.columns(0..k));
    let residual = m.sub(&low)?;
    let full_range = range(m.data());
    let residual_range = range(residual.data());
    Ok(TensorAnalysis {
        rows: m.rows(),
        cols: m.cols(),
        rank: k,
        spectrum: svd.values,
        elbow,
        full_histogram,
        components,
        residual_histogram: Histogram::spanning(residual.data(), BINS)?,
        full_range,
        residual_range,
        range_ratio: (residual_range > 0.0).then(|| full_range / residual_range),
    })
}

impl Report for TensorAnalysis {
    fn kind(&self) -> &'static str {
        "tensor_analysis"
    }

    fn visit_floats(&self, f: &mut dyn FnMut(&str, f64)) {
        visit_slice(f, "spectrum", &self.spectrum);
        if let Some(e) = &self.elbow {
            f("elbow.fraction", e.fraction);
            f("elbow.max_curvature", e.max_curvature);
        }
        f("full_range", self.full_range);
        f("residual_range", self.residual_range);
        if let Some(r) = self.range_ratio {
            f("range_ratio", r);
        }
        for c in &self.components {
            f(&format!("components[{}].max_abs", c.index), c.max_abs);
        }
    }

    fn series(&self) -> Option<Series> {
        Some(
            Series::new()
                .with("index", (0..self.spectrum.len()).map(|i| i as f64).collect())
                .with("singular_value", self.spectrum.clone()),
        )
    }
}
