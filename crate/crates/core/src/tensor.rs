//! Dense row-major kernels shared by the rest of the crate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input_err, Error, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data; rejects wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                expected: (rows, cols),
                found: (data.len(), 1),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Build from a slice of equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    expected: (rows.len(), cols),
                    found: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| f64::max(m, libm::fabs(*x)))
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add",
                expected: self.shape(),
                found: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * k).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Stack rows of several matrices with the same column count.
    pub fn vstack(parts: &[&Matrix], cols: usize) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    expected: (p.rows, cols),
                    found: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            expected: (a.cols, b.cols),
            found: b.shape(),
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

/// `v * m` for a row vector `v`.
pub fn vecmat(v: &[f64], m: &Matrix) -> Result<Vec<f64>> {
    if v.len() != m.rows {
        return Err(Error::Shape {
            op: "vecmat",
            expected: (1, m.rows),
            found: (1, v.len()),
        });
    }
    let mut out = vec![0.0; m.cols];
    for (k, &vk) in v.iter().enumerate() {
        for (o, &mkj) in out.iter_mut().zip(m.row(k)) {
            *o += vk * mkj;
        }
    }
    Ok(out)
}

/// `m * v` for a column vector `v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.cols {
        return Err(Error::Shape {
            op: "matvec",
            expected: (m.cols, 1),
            found: (v.len(), 1),
        });
    }
    Ok((0..m.rows).map(|r| dot(m.row(r), v)).collect())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// Softmax over each row of `m * scale`, with max subtraction.
pub fn row_softmax(m: &Matrix, scale: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        softmax_into(m.row(r), scale, &mut out.data[r * m.cols..(r + 1) * m.cols]);
    }
    out
}

pub(crate) fn softmax_into(row: &[f64], scale: f64, out: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| f64::max(m, x * scale));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x * scale - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-row normalization to zero mean and unit (population) variance.
pub fn layer_norm(m: &Matrix, eps: f64) -> Result<Matrix> {
    if m.cols < 2 {
        return Err(input_err("layer_norm needs at least two columns"));
    }
    let n = m.cols as f64;
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + eps);
        for (o, &x) in out.data[r * m.cols..(r + 1) * m.cols].iter_mut().zip(row) {
            *o = (x - mean) * inv;
        }
    }
    Ok(out)
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Exact GELU, `x * Phi(x)` with the erf form.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// Result of a power-iteration run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when `iters` ran out before successive estimates agreed within `tol`.
    pub converged: bool,
}

/// Largest singular value by power iteration on `WᵀW`.
///
/// Starts from the normalized all-ones vector. If that vector lies in the
/// null space, the standard basis vectors are tried in order.
pub fn spectral_norm(w: &Matrix, iters: usize, tol: f64) -> Result<SpectralEstimate> {
    if w.rows == 0 || w.cols == 0 || w.is_zero() {
        return Err(input_err("spectral_norm of a zero matrix"));
    }
    let n = w.cols;
    let mut v = vec![1.0 / libm::sqrt(n as f64); n];
    let mut wv = matvec(w, &v)?;
    let mut basis = 0;
    while norm2(&wv) == 0.0 {
        // all-ones start is in the null space
        v = vec![0.0; n];
        v[basis] = 1.0;
        wv = matvec(w, &v)?;
        basis += 1;
    }
    let wt = w.transpose();
    let mut sigma = norm2(&wv);
    for it in 1..=iters.max(1) {
        let mut next = matvec(&wt, &wv)?;
        let nn = norm2(&next);
        for x in next.iter_mut() {
            *x /= nn;
        }
        v = next;
        wv = matvec(w, &v)?;
        let updated = norm2(&wv);
        let delta = libm::fabs(updated - sigma);
        sigma = updated;
        if delta <= tol {
            return Ok(SpectralEstimate {
                value: sigma,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(SpectralEstimate {
        value: sigma,
        iterations: iters.max(1),
        converged: false,
    })
}
