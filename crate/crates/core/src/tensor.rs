//! Dense row-major `f64` matrices.
//!
//! Every reduction in this module runs in a fixed index order, so two
//! computations that feed identical inputs through the same routine agree
//! bit for bit. The exactness checks in `simexec` rely on that.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LlepError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LlepError::shape(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice yields `0 x cols`
    /// only through [`Matrix::zeros`]; here it yields `0 x 0`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(LlepError::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Fills a matrix with independent standard normal draws, row by row.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New matrix whose row `j` is `self.row(indices[j])`.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically. All parts must share `cols`.
    pub fn vstack(parts: &[Matrix], cols: usize) -> Result<Self> {
        let rows = parts.iter().map(Matrix::rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for part in parts {
            if part.cols != cols {
                return Err(LlepError::shape(format!(
                    "cannot stack a {}-column block into {cols} columns",
                    part.cols
                )));
            }
            data.extend_from_slice(&part.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// `self * rhs`, accumulated over the shared dimension in ascending order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(LlepError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            vec_mat_into(self.row(r), rhs, out.row_mut(r));
        }
        Ok(out)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LlepError::shape(format!(
                "add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// `out = v^T * m` with the reduction over rows of `m` in ascending order.
///
/// Shared by the grouped GEMM and the dense oracle so both produce the same
/// bits for the same token row.
#[inline]
pub fn vec_mat_into(v: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(v.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.fill(0.0);
    for (k, &vk) in v.iter().enumerate() {
        let mrow = m.row(k);
        for (o, &w) in out.iter_mut().zip(mrow) {
            *o += vk * w;
        }
    }
}

/// Accumulates the rank-one update `acc += scale * (u ⊗ g)` into a `u.len() x g.len()` matrix.
#[inline]
pub fn add_scaled_outer(acc: &mut Matrix, scale: f64, u: &[f64], g: &[f64]) {
    debug_assert_eq!(acc.rows, u.len());
    debug_assert_eq!(acc.cols, g.len());
    for (r, &ur) in u.iter().enumerate() {
        let s = scale * ur;
        for (a, &gc) in acc.row_mut(r).iter_mut().zip(g) {
            *a += s * gc;
        }
    }
}
