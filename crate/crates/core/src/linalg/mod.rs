// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` linear algebra used throughout the crate.
//!
//! Everything here is deliberately small: a row-major [`Matrix`], products in
//! a fixed accumulation order, a stable softmax, Cholesky solves for the GP,
//! a one-sided Jacobi SVD, and a seeded random source.

mod matrix;
mod rng;
mod svd;

pub use matrix::Matrix;
pub use rng::Rng;
pub use svd::{svd, Svd, SVD_MAX_SWEEPS};

use thiserror::Error;

/// Errors raised by the linear algebra primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("svd did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows(), b.cols());
    let mut out = vec![0.0; n * m];
    // i-k-j order: every output entry accumulates over k left to right.
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix::from_vec(n, m, out))
}

/// Product `a · bᵀ`.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(a, &b.transpose())
}

/// Product `aᵀ · b`.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_at",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(&a.transpose(), b)
}

/// Matrix-vector product `m · v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols() != v.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "matvec",
            left: m.shape(),
            right: (v.len(), 1),
        });
    }
    Ok((0..m.rows()).map(|i| dot(m.row(i), v)).collect())
}

/// Left-to-right dot product. Callers guarantee equal lengths.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(LinalgError::Empty("softmax"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite("softmax"));
    }
    Ok(softmax_unchecked(v))
}

/// Softmax without input validation; used on hot paths whose inputs are
/// already known to be finite and nonempty.
pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// `log Σ exp(v)` computed with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "cholesky",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let row = l.row(i);
        let s = b[i] - dot(&row[..i], &x[..i]);
        x[i] = s / row[i];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_t(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}
