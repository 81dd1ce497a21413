//! Dense f64 kernels shared by the model, cache and intervention code.
//!
//! Everything here is a pure function of its inputs. Matrices are row-major
//! and always hold finite values; constructors reject anything else.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    BadShape {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("shape mismatch: {op} of {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Row-major matrix of finite f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::BadShape {
                    rows: rows.len(),
                    cols,
                    len: data.len() + r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// First non-finite entry, if any.
    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(NumericsError::NonFinite {
                row: idx / self.cols.max(1),
                col: idx % self.cols.max(1),
                value: self.data[idx],
            }),
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Row-wise softmax, max-subtracted before exponentiation.
pub fn row_softmax(logits: &Matrix) -> Result<Matrix, NumericsError> {
    logits.check_finite()?;
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        softmax_into(logits.row(i), out.row_mut(i));
    }
    Ok(out)
}

/// Cosine similarity with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// Set when either input is the zero vector; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Similarity, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Similarity {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Similarity {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        vec_matmul_into(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// `out = x · m` for a row vector `x`. Accumulates in i-k-j order.
pub fn vec_matmul_into(x: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += xk * w;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization of one row: `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm_into(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv * g + b;
    }
}

pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Result<Matrix, NumericsError> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(NumericsError::LengthMismatch(
            x.cols,
            gain.len().min(bias.len()),
        ));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        layer_norm_into(x.row(i), gain, bias, out.row_mut(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(row_softmax(&m).unwrap().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_log_ratio() {
        let m = Matrix::from_vec(1, 2, vec![1f64.ln(), 3f64.ln()]).unwrap();
        let p = row_softmax(&m).unwrap();
        assert!(close(p.get(0, 0), 0.25, 1e-12));
        assert!(close(p.get(0, 1), 0.75, 1e-12));
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let m = Matrix::from_vec(1, 2, vec![1000.0, 1000.0]).unwrap();
        assert_eq!(row_softmax(&m).unwrap().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![0.0, f64::NAN]),
            Err(NumericsError::NonFinite { row: 0, col: 1, .. })
        ));
        let bad = Matrix {
            rows: 1,
            cols: 2,
            data: vec![f64::INFINITY, 0.0],
        };
        assert!(row_softmax(&bad).is_err());
    }

    #[test]
    fn cosine_cases() {
        let s = cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(close(s.value, 1.0, 1e-12));
        assert_eq!(
            cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value,
            0.0
        );
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!(close(s.value, std::f64::consts::FRAC_1_SQRT_2, 1e-12));
    }

    #[test]
    fn cosine_zero_vector_is_flagged() {
        let s = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.degenerate);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_cases() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        assert_eq!(
            matmul(&Matrix::zeros(2, 2), &m).unwrap(),
            Matrix::zeros(2, 2)
        );
        let v = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&m, &v).unwrap().data(), &[17.0, 39.0]);
        assert!(matmul(&v, &v).is_err());
    }

    #[test]
    fn layer_norm_zero_row_maps_to_bias() {
        let x = Matrix::zeros(1, 4);
        let out = layer_norm(&x, &[1.0; 4], &[0.5; 4]).unwrap();
        assert_eq!(out.row(0), &[0.5; 4]);
    }
}
