use std::ops::{Deref, DerefMut};

use crate::error::{check_len, NddeError, Result};

/// A dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    /// Wraps `data`, rejecting NaN and infinite entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NddeError::Input(format!(
                "non-finite entry {} at index {i}",
                data[i]
            )));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for RealVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for RealVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = NddeError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NddeError::Input("non-finite matrix entry".into()));
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec", self.cols, x.len())?;
        let mut out = vec![0.0; self.rows];
        matvec_into(&self.data, self.rows, self.cols, x, &mut out);
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x` for a row-major `rows x cols` slice.
#[inline]
pub(crate) fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = dot(row, x);
    }
}

/// `out = W^T y` for a row-major `rows x cols` slice.
#[inline]
pub(crate) fn matvec_t_into(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    out[..cols].fill(0.0);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        axpy(y[r], row, &mut out[..cols]);
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(RealVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(RealVector::new(vec![f64::INFINITY]).is_err());
        assert!(RealMatrix::new(1, 1, vec![f64::NEG_INFINITY]).is_err());
        assert!(RealVector::new(vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(RealMatrix::new(2, 2, vec![1.0; 3]).is_err());
        let m = RealMatrix::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert!(m.matvec(&[1.0]).is_err());
    }

    #[test]
    fn transpose_product() {
        let w = [1., 2., 3., 4., 5., 6.];
        let mut out = [0.0; 3];
        matvec_t_into(&w, 2, 3, &[1.0, -1.0], &mut out);
        assert_eq!(out, [-3.0, -3.0, -3.0]);
    }
}
