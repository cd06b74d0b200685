//! Row-major dense matrix carrier and the emulated GeMM kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::{round_bf16, EmulatedFormat};

/// Row-major real matrix. `format` records which emulated grid the values
/// are guaranteed to lie on; arithmetic results are always [`EmulatedFormat::Wide`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    format: EmulatedFormat,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            format: EmulatedFormat::Wide,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            format: EmulatedFormat::Wide,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            data,
            format: EmulatedFormat::Wide,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.format = EmulatedFormat::Wide;
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn format(&self) -> EmulatedFormat {
        self.format
    }

    /// Tags the matrix as holding `format` values, checking every entry.
    pub fn with_format(mut self, format: EmulatedFormat) -> Result<Self> {
        if let Some(&v) = self.data.iter().find(|&&v| !format.is_representable(v)) {
            return Err(Error::Format(format!("{v} is not representable in {format:?}")));
        }
        self.format = format;
        Ok(self)
    }

    /// Caller asserts every value is on the grid of `format`.
    pub(crate) fn set_format(&mut self, format: EmulatedFormat) {
        self.format = format;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.format = EmulatedFormat::Wide;
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Rows `idx` gathered into a new matrix, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
            format: self.format,
        }
    }

    pub fn columns(&self, range: std::ops::Range<usize>) -> Self {
        let width = range.len();
        Self::from_fn(self.rows, width, |i, j| self.get(i, range.start + j))
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
            format: self.format,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
            format: EmulatedFormat::Wide,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            format: EmulatedFormat::Wide,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    /// `self * diag(d)`: scales column j by `d[j]`.
    pub fn scale_columns(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.cols {
            return Err(Error::Shape(format!(
                "{} column scales for {} columns",
                d.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        out.format = EmulatedFormat::Wide;
        for row in out.data.chunks_mut(self.cols.max(1)) {
            for (v, &s) in row.iter_mut().zip(d) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// `diag(d) * self`.
    pub fn scale_rows(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.rows {
            return Err(Error::Shape(format!(
                "{} row scales for {} rows",
                d.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        out.format = EmulatedFormat::Wide;
        for (row, &s) in out.data.chunks_mut(self.cols.max(1)).zip(d) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("dot of differently shaped matrices".into()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(&value) => Err(Error::NonFinite {
                value,
                context: context.to_string(),
            }),
            None => Ok(()),
        }
    }

    /// ‖self − other‖_F / ‖other‖_F (absolute error when `other` is zero).
    pub fn relative_error(&self, reference: &Self) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let norm = reference.frobenius_norm();
        Ok(if norm > 0.0 { diff / norm } else { diff })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        gemm(self, other, Accumulation::Wide)
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// How partial sums of an emulated GeMM are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    /// Full 64-bit accumulation (oracle runs).
    Wide,
    /// Products over each run of `chunk` contraction indices are summed
    /// exactly, and the running sum is rounded to BF16 after every chunk.
    Bf16 { chunk: usize },
}

impl Accumulation {
    pub const BF16: Accumulation = Accumulation::Bf16 { chunk: 16 };
}

/// Whether a GeMM operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// Row-major view of `op(m)`: logical shape, base offset stride per row and
/// per column.
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> View<'a> {
    fn new(m: &'a DenseMatrix, op: Op) -> Self {
        match op {
            Op::N => View {
                data: &m.data,
                rows: m.rows,
                cols: m.cols,
                row_stride: m.cols,
                col_stride: 1,
            },
            Op::T => View {
                data: &m.data,
                rows: m.cols,
                cols: m.rows,
                row_stride: 1,
                col_stride: m.cols,
            },
        }
    }
}

/// `a * b` with the requested accumulation semantics.
pub fn gemm(a: &DenseMatrix, b: &DenseMatrix, acc: Accumulation) -> Result<DenseMatrix> {
    gemm_op(a, Op::N, b, Op::N, acc)
}

/// `op(a) * op(b)` with the requested accumulation semantics.
pub fn gemm_op(
    a: &DenseMatrix,
    ta: Op,
    b: &DenseMatrix,
    tb: Op,
    acc: Accumulation,
) -> Result<DenseMatrix> {
    let va = View::new(a, ta);
    let vb = View::new(b, tb);
    if va.cols != vb.rows {
        return Err(Error::Shape(format!(
            "gemm {}x{} * {}x{}",
            va.rows, va.cols, vb.rows, vb.cols
        )));
    }
    let (m, k, n) = (va.rows, va.cols, vb.cols);
    let mut out = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    match acc {
        Accumulation::Wide => {
            raw_gemm(&va, &vb, 0..k, &mut out.data);
        }
        Accumulation::Bf16 { chunk } => {
            let chunk = chunk.max(1);
            let mut partial = vec![0.0; m * n];
            let mut start = 0;
            while start < k {
                let end = (start + chunk).min(k);
                raw_gemm(&va, &vb, start..end, &mut partial);
                for (acc, p) in out.data.iter_mut().zip(&partial) {
                    *acc = round_bf16(*acc + *p);
                }
                start = end;
            }
        }
    }
    Ok(out)
}

/// c = a[:, range] * b[range, :]
fn raw_gemm(a: &View, b: &View, range: std::ops::Range<usize>, c: &mut [f64]) {
    let (m, n) = (a.rows, b.cols);
    let k = range.len();
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let a_off = range.start * a.col_stride;
    let b_off = range.start * b.row_stride;
    debug_assert!(c.len() == m * n);
    // SAFETY: each view addresses logical (i, p) at row_stride*i + col_stride*p
    // inside its backing slice; the contraction sub-range starts at
    // `range.start` and ends within the logical contraction length, and `c`
    // holds exactly m * n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a_off),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b_off),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
