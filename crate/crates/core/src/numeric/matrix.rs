//! Dense row-major `f32` matrices with a fixed-order matrix product.

use std::ops::Range;

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
///
/// Values are expected to be finite unless a caller explicitly constructs
/// otherwise; operations that require finiteness check it themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from row-major data; the length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows.checked_mul(cols).ok_or_else(|| {
            Error::InvalidArgument(format!("matrix shape {rows}x{cols} overflows"))
        })?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies a block of rows `[start, end)` into a new matrix.
    pub fn row_block(&self, range: Range<usize>) -> Result<Matrix> {
        if range.start > range.end || range.end > self.rows {
            return Err(Error::ShapeMismatch(format!(
                "row block {range:?} out of bounds for {} rows",
                self.rows
            )));
        }
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Matrix::from_vec(range.end - range.start, self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Relative Frobenius distance `||a - b||_F / ||b||_F`, computed in f64.
    /// Returns 0 when both matrices are identically zero.
    pub fn rel_frobenius_distance(&self, other: &Matrix) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "rel_frobenius_distance: shape mismatch"
        );
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a as f64) - (*b as f64);
            num += d * d;
            den += (*b as f64) * (*b as f64);
        }
        if den == 0.0 {
            return if num == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (num / den).sqrt()
    }
}

/// Matrix product with a fixed accumulation order.
///
/// Each output element accumulates its `k` terms in ascending order, one
/// rounded f32 multiply and add per term (no FMA), so results are bit-exact
/// reproducible and comparable against a naive triple-loop oracle.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_col_range(a, 0..a.cols, b)
}

/// `a[:, cols] * b` without materializing the column slice.
///
/// Accumulation order is identical to [`matmul`] on the sliced operand.
pub fn matmul_col_range(a: &Matrix, cols: Range<usize>, b: &Matrix) -> Result<Matrix> {
    if cols.start > cols.end || cols.end > a.cols {
        return Err(Error::ShapeMismatch(format!(
            "column range {cols:?} out of bounds for {} columns",
            a.cols
        )));
    }
    let inner = cols.end - cols.start;
    if inner != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "matmul: left has {inner} columns, right has {} rows",
            b.rows
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = &a.row(i)[cols.clone()];
        let out_row = out.row_mut(i);
        for (k, &a_ik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}
