//! Dense row-major matrices and the handful of kernels attention analysis needs.

use std::fmt;

use crate::error::{contract, Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} has {} columns, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Largest absolute entry-wise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

/// Boolean visibility matrix: `true` marks a key position a query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} mask needs {} flags, got {}",
                rows * cols,
                visible.len()
            )));
        }
        Ok(Self { rows, cols, visible })
    }

    /// Everything visible.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            visible: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut visible = vec![false; n * n];
        for i in 0..n {
            visible[i * n..=i * n + i].fill(true);
        }
        Self {
            rows: n,
            cols: n,
            visible,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.visible[row * self.cols..(row + 1) * self.cols]
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(contract(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    check_finite(out)
}

/// `result[i][j] = dot(q_i, k_j) / sqrt(scale_dim)`.
pub fn scaled_scores(q_rows: &Matrix, k_rows: &Matrix, scale_dim: usize) -> Result<Matrix> {
    if q_rows.cols != k_rows.cols {
        return Err(Error::DimensionMismatch(format!(
            "query width {} vs key width {}",
            q_rows.cols, k_rows.cols
        )));
    }
    if scale_dim == 0 {
        return Err(contract("scale_dim must be at least 1"));
    }
    let inv = 1.0 / (scale_dim as f64).sqrt();
    let mut out = Matrix::zeros(q_rows.rows, k_rows.rows);
    for i in 0..q_rows.rows {
        let q = q_rows.row(i);
        let out_row = &mut out.data[i * k_rows.rows..(i + 1) * k_rows.rows];
        for (j, o) in out_row.iter_mut().enumerate() {
            let dot: f64 = q.iter().zip(k_rows.row(j)).map(|(a, b)| a * b).sum();
            *o = dot * inv;
        }
    }
    check_finite(out)
}

/// Row-wise softmax with max subtraction. Masked entries are excluded before
/// exponentiation and come out exactly zero.
pub fn row_softmax(logits: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.shape() != logits.shape() {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} vs logits {:?}",
                m.shape(),
                logits.shape()
            )));
        }
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        softmax_row_into(logits.row(i), mask.map(|m| m.row(i)), out.row_mut(i))
            .map_err(|()| Error::FullyMaskedRow(i))?;
    }
    Ok(out)
}

/// Softmax of one row into `out`; `Err(())` when no entry is visible.
pub(crate) fn softmax_row_into(
    logits: &[f64],
    visible: Option<&[bool]>,
    out: &mut [f64],
) -> std::result::Result<(), ()> {
    let is_visible = |j: usize| visible.is_none_or(|v| v[j]);
    let max = (0..logits.len())
        .filter(|&j| is_visible(j))
        .map(|j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if is_visible(j) {
            let e = (logits[j] - max).exp();
            sum += e;
            e
        } else {
            0.0
        };
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

fn check_finite(m: Matrix) -> Result<Matrix> {
    match m.data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFinite {
            row: pos / m.cols.max(1),
            col: pos % m.cols.max(1),
        }),
        None => Ok(m),
    }
}
