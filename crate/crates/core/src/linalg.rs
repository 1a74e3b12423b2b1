//! Small dense linear algebra for the implicit step equations.
//!
//! The systems solved here are `(d+1) x (d+1)` where `d` is the configuration
//! dimension — in practice 2x2 — so this module keeps to the basics: a
//! row-major matrix, Gaussian elimination with partial pivoting, and singular
//! values via one-sided Jacobi.  The 2-norm condition number exposed to the
//! solver comes from the singular values, so it is exact up to rounding rather
//! than a norm-product bound.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from a flat row-major slice; `data.len()` must equal
    /// `rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest absolute entry; useful as a cheap scale estimate.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(math::abs(x)))
    }
}

impl core::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Infinity norm of a vector (0 for an empty slice).
pub fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, &v| m.max(math::abs(v)))
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot is exactly zero (structurally singular); the
/// caller is expected to screen near-singular systems through
/// [`singular_values`] / a condition estimate instead.
pub fn solve_lu(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    assert!(a.is_square(), "solve_lu needs a square matrix");
    assert_eq!(a.rows, b.len(), "right-hand side length mismatch");
    let n = a.rows;
    let mut m = a.clone();
    let mut x = b.to_vec();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_mag = math::abs(m[(col, col)]);
        for r in (col + 1)..n {
            let mag = math::abs(m[(r, col)]);
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = r;
            }
        }
        if pivot_mag == 0.0 || !pivot_mag.is_finite() {
            return None;
        }
        if pivot_row != col {
            for c in 0..n {
                let tmp = m[(col, c)];
                m[(col, c)] = m[(pivot_row, c)];
                m[(pivot_row, c)] = tmp;
            }
            x.swap(col, pivot_row);
        }
        for r in (col + 1)..n {
            let factor = m[(r, col)] / m[(col, col)];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                let sub = factor * m[(col, c)];
                m[(r, c)] -= sub;
            }
            x[r] -= factor * x[col];
        }
    }

    for row in (0..n).rev() {
        let mut sum = x[row];
        for c in (row + 1)..n {
            sum -= m[(row, c)] * x[c];
        }
        x[row] = sum / m[(row, row)];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Singular values in descending order, computed by one-sided Jacobi
/// (rotations orthogonalise the columns; the singular values are the
/// resulting column norms).  Accurate and dependency-free for the tiny
/// matrices used here.
// Indexed loops: the rotation updates two columns in lockstep, which split
// borrows would only obscure.
#[allow(clippy::needless_range_loop)]
pub fn singular_values(a: &Mat) -> Vec<f64> {
    let (m, n) = (a.rows, a.cols);
    // Column-major working copy; u[j] is column j.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();

    const MAX_SWEEPS: usize = 60;
    const ORTHO_TOL: f64 = 1e-30;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += u[p][i] * u[p][i];
                    beta += u[q][i] * u[q][i];
                    gamma += u[p][i] * u[q][i];
                }
                if gamma * gamma <= ORTHO_TOL * alpha * beta {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + math::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + math::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = c * t;
                for i in 0..m {
                    let up = u[p][i];
                    let uq = u[q][i];
                    u[p][i] = c * up - s * uq;
                    u[q][i] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = u
        .iter()
        .map(|col| math::sqrt(col.iter().map(|x| x * x).sum()))
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    sv
}

/// 2-norm condition number `sigma_max / sigma_min`.
///
/// Returns `f64::INFINITY` for singular input and for anything containing a
/// non-finite entry, so callers can treat "too large" and "broken" uniformly.
pub fn condition_2norm(a: &Mat) -> f64 {
    if a.data.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sv = singular_values(a);
    let (smax, smin) = match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) => (hi, lo),
        _ => return f64::INFINITY,
    };
    if smax == 0.0 {
        // The zero matrix: conventionally singular.
        return f64::INFINITY;
    }
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}
