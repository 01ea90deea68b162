// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-sided (Hestenes) Jacobi SVD.

use super::{dot, LinalgError, Matrix, Result};

/// Sweep cap before reporting non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;

/// Largest tolerated `|aᵢ·aⱼ| / (‖aᵢ‖‖aⱼ‖)` at convergence.
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Thin SVD `m = U · diag(s) · Vt` with `k = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Nonnegative, descending.
    pub singular_values: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let (m, n) = (self.u.rows(), self.vt.cols());
        Matrix::from_fn(m, n, |i, j| {
            (0..k)
                .map(|c| self.u.get(i, c) * self.singular_values[c] * self.vt.get(c, j))
                .sum()
        })
    }
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("svd"));
    }
    if m.rows() >= m.cols() {
        tall_svd(m)
    } else {
        let t = tall_svd(&m.transpose())?;
        Ok(Svd {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        })
    }
}

/// SVD for `rows ≥ cols`.
fn tall_svd(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    // Work on transposes so the columns being orthogonalized are contiguous.
    let mut work = m.transpose();
    let mut v = Matrix::identity(cols);

    let mut converged = cols < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps });
        }
        sweeps += 1;
        let mut worst = 0.0f64;
        for i in 0..cols - 1 {
            for j in (i + 1)..cols {
                let alpha = dot(work.row(i), work.row(i));
                let beta = dot(work.row(j), work.row(j));
                let gamma = dot(work.row(i), work.row(j));
                let scale = (alpha * beta).sqrt();
                if scale <= f64::MIN_POSITIVE || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / scale;
                worst = worst.max(ratio);
                if ratio <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut work, i, j, c, s);
                rotate_rows(&mut v, i, j, c, s);
            }
        }
        converged = worst < OFF_DIAGONAL_TOL;
    }

    let mut order: Vec<(usize, f64)> = (0..cols)
        .map(|j| (j, dot(work.row(j), work.row(j)).sqrt()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let largest = order.first().map_or(0.0, |o| o.1);
    let null_tol = largest * (rows.max(cols) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut singular_values = Vec::with_capacity(cols);
    let mut vt = Matrix::zeros(cols, cols);
    let mut deficient = Vec::new();
    for (slot, &(j, sigma)) in order.iter().enumerate() {
        vt.row_mut(slot).copy_from_slice(v.row(j));
        if sigma > null_tol && sigma > 0.0 {
            singular_values.push(sigma);
            u_cols.push(work.row(j).iter().map(|x| x / sigma).collect());
        } else {
            singular_values.push(0.0);
            u_cols.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    complete_basis(&mut u_cols, &deficient);

    let u = Matrix::from_fn(rows, cols, |i, c| u_cols[c][i]);
    Ok(Svd {
        u,
        singular_values,
        vt,
    })
}

/// Applies the plane rotation to rows `i`, `j` of `m`.
fn rotate_rows(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let n = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(j * n);
    let ri = &mut head[i * n..(i + 1) * n];
    let rj = &mut tail[..n];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the zero columns listed in `missing` with unit vectors orthogonal to
/// every other column (Gram-Schmidt against the standard basis).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let p = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= p * o;
                    }
                }
            }
            let n = dot(&e, &e).sqrt();
            if n > 1e-6 {
                cols[slot] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul_at, Rng};
    use approx::assert_abs_diff_eq;

    fn check(m: &Matrix) {
        let d = svd(m).unwrap();
        let k = m.rows().min(m.cols());
        assert_eq!(d.singular_values.len(), k);
        for w in d.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(d.singular_values.iter().all(|&s| s >= 0.0));
        let utu = matmul_at(&d.u, &d.u).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(k)) < 1e-8);
        let vvt = crate::linalg::matmul_bt(&d.vt, &d.vt).unwrap();
        assert!(vvt.max_abs_diff(&Matrix::identity(k)) < 1e-8);
        let resid = d.reconstruct();
        let mut diff = resid.clone();
        diff.add_scaled(m, -1.0);
        assert!(diff.frobenius_norm() <= 1e-8 * m.frobenius_norm().max(1e-300));
    }

    #[test]
    fn identity_and_diagonal() {
        let d = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(d.singular_values, vec![1.0, 1.0, 1.0]);
        let d = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        for (s, want) in d.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert_abs_diff_eq!(*s, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn random_shapes_reconstruct() {
        let mut rng = Rng::seed_from(11);
        check(&Matrix::random_normal(5, 3, 1.0, &mut rng));
        check(&Matrix::random_normal(3, 5, 1.0, &mut rng));
        for _ in 0..100 {
            let r = 1 + rng.below(64);
            let c = 1 + rng.below(64);
            check(&Matrix::random_normal(r, c, 1.0, &mut rng));
        }
    }

    #[test]
    fn rank_deficient_completes_basis() {
        let m = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 3.0],
        ]);
        check(&m);
        let d = svd(&m).unwrap();
        assert!(d.singular_values[1] < 1e-12);
        check(&Matrix::zeros(4, 3));
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::identity(2);
        m.set(0, 1, f64::INFINITY);
        assert!(matches!(svd(&m), Err(LinalgError::NonFinite(_))));
    }
}
