//! Dense row-major f64 matrices and the fixed numeric primitives built on
//! them: matrix products, additive-mask softmax, RMS normalization.
//!
//! All arithmetic is 64-bit and uses a deterministic accumulation order
//! (row-major, left to right), so repeated runs are bit-identical.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape(format!(
                    "ragged rows: expected {} columns, found {}",
                    c,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Single row as a 1xN matrix.
    pub fn row_matrix(row: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: row.len(),
            data: row.to_vec(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn mul_elem(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "elementwise mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += c * other`, in place.
    pub fn add_scaled_assign(&mut self, other: &Matrix, c: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-level equality (distinguishes -0.0 from +0.0).
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Standard matrix product with deterministic row-major, left-to-right
    /// accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} x {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_nt: {}x{} x ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += a_row[k] * b_row[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_tn: ({}x{})^T x {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let out_row = &mut out.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        Ok(out)
    }
}

/// Additive attention mask: zero on and below the diagonal, -inf above, so
/// position i attends only to positions <= i.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

/// Row-wise softmax of `scores + mask`, where `mask` entries are 0 or -inf.
///
/// Masked positions come out as exactly 0.0 and are skipped during the
/// row-max and sum accumulation, so an unmasked prefix of a row produces
/// bit-identical probabilities regardless of how many masked columns follow.
pub fn masked_softmax(scores: &Matrix, mask: &Matrix) -> Result<Matrix> {
    if scores.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "masked_softmax: scores {}x{} vs mask {}x{}",
            scores.rows(),
            scores.cols(),
            mask.rows(),
            mask.cols()
        )));
    }
    let (rows, cols) = scores.shape();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let s = scores.row(i);
        let m = mask.row(i);
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..cols {
            if m[j] == 0.0 && s[j] > row_max {
                row_max = s[j];
            }
        }
        if row_max == f64::NEG_INFINITY {
            return Err(Error::Degenerate(format!("fully masked row {i}")));
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if m[j] == 0.0 {
                let e = (s[j] - row_max).exp();
                out.set(i, j, e);
                sum += e;
            }
        }
        for j in 0..cols {
            if m[j] == 0.0 {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
    }
    Ok(out)
}

pub const RMS_NORM_EPS: f64 = 1e-6;

/// RMS normalization: each row is scaled by 1/sqrt(mean(x^2) + eps), then
/// multiplied elementwise by `gain`.
pub fn rms_norm(x: &Matrix, gain: &[f64]) -> Result<Matrix> {
    if gain.len() != x.cols() {
        return Err(Error::Shape(format!(
            "rms_norm: gain length {} vs {} columns",
            gain.len(),
            x.cols()
        )));
    }
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let r = 1.0 / (ms + RMS_NORM_EPS).sqrt();
        let out_row = out.row_mut(i);
        for j in 0..cols {
            out_row[j] = row[j] * r * gain[j];
        }
    }
    Ok(out)
}

/// GELU with the tanh approximation.
pub fn gelu(v: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(v: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * v * v)
}
