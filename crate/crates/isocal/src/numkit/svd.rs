//! Thin singular value decomposition via one-sided Jacobi rotations.
//!
//! Deterministic by construction: fixed cyclic sweep order, a fixed sign
//! convention (the largest-magnitude entry of every right singular vector is
//! made positive), and stable descending sort of the singular values.

use crate::error::{Error, Result};
use crate::isotropy::ProbeSet;
use crate::numkit::mat::{dot, norm, EmbeddingMatrix, Mat};

/// Convergence threshold on |a_p . a_q| / (|a_p| |a_q|).
const JACOBI_TOL: f64 = 1e-15;
/// Sweep cap; exceeding it is reported as a numerical failure.
const MAX_SWEEPS: usize = 60;
/// Columns with norm below DEAD_FACTOR * (largest initial column norm) are
/// treated as exactly zero singular values.
const DEAD_FACTOR: f64 = 1e-14;

/// Thin SVD factors W = left . diag(singular_values) . right^T.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// N×r with orthonormal columns.
    pub left: Mat,
    /// Length r = min(N, d), nonincreasing, all >= 0.
    pub singular_values: Vec<f64>,
    /// d×r with orthonormal columns.
    pub right: Mat,
}

impl SvdFactors {
    pub fn rank_bound(&self) -> usize {
        self.singular_values.len()
    }

    /// left . diag(sigma) . right^T, for reconstruction checks.
    pub fn reconstruct(&self) -> Mat {
        let r = self.singular_values.len();
        let n = self.left.rows();
        let d = self.right.rows();
        let mut out = Mat::zeros(n, d);
        for k in 0..r {
            let s = self.singular_values[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..n {
                let uik = self.left.get(i, k) * s;
                for j in 0..d {
                    out.set(i, j, out.get(i, j) + uik * self.right.get(j, k));
                }
            }
        }
        out
    }
}

/// Thin SVD of an embedding matrix.
pub fn svd(w: &EmbeddingMatrix) -> Result<SvdFactors> {
    svd_mat(w.as_mat())
}

pub(crate) fn svd_mat(a: &Mat) -> Result<SvdFactors> {
    if a.rows() >= a.cols() {
        let (u, sigma, v) = jacobi_tall(a)?;
        Ok(apply_sign_convention(SvdFactors {
            left: u,
            singular_values: sigma,
            right: v,
        }))
    } else {
        // Factor the transpose and swap the roles of U and V.
        let (u, sigma, v) = jacobi_tall(&a.transpose())?;
        Ok(apply_sign_convention(SvdFactors {
            left: v,
            singular_values: sigma,
            right: u,
        }))
    }
}

/// One-sided Jacobi on an m×n matrix with m >= n. Returns (U m×n, sigma, V n×n).
fn jacobi_tall(a: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);

    // Work on A^T so each column of A is a contiguous row.
    let mut cols = a.transpose();
    let mut vt = Mat::identity(n);

    let dead = DEAD_FACTOR * (0..n).map(|j| norm(cols.row(j))).fold(0.0, f64::max);
    let dead_sq = dead * dead;

    let mut converged = n < 2;
    let mut last_off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_ratio: f64 = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(cols.row(p), cols.row(p));
                let beta = dot(cols.row(q), cols.row(q));
                if alpha <= dead_sq || beta <= dead_sq {
                    continue;
                }
                let gamma = dot(cols.row(p), cols.row(q));
                let ratio = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                max_ratio = max_ratio.max(ratio);
                if ratio <= JACOBI_TOL {
                    continue;
                }
                // Rotation diagonalizing the 2x2 Gram block [[alpha,gamma],[gamma,beta]].
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        last_off = max_ratio;
        if max_ratio <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            off: last_off,
        });
    }

    // Extract singular values, sort descending (stable), normalize U columns.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| norm(cols.row(j))).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut sigma = vec![0.0; n];
    let mut u = Mat::zeros(m, n);
    let mut v = Mat::zeros(n, n);
    let mut live = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            v.set(i, k, vt.get(j, i));
        }
        if norms[j] > dead {
            sigma[k] = norms[j];
            let col = cols.row(j);
            for i in 0..m {
                u.set(i, k, col[i] / norms[j]);
            }
            live.push(k);
        }
    }
    // Zero singular values still need orthonormal U columns.
    complete_orthonormal(&mut u, &mut live);
    Ok((u, sigma, v))
}

#[inline]
fn rotate_rows(m: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let (pr, qr) = (p * cols, q * cols);
    let data = m.data_mut();
    for i in 0..cols {
        let xp = data[pr + i];
        let xq = data[qr + i];
        data[pr + i] = c * xp - s * xq;
        data[qr + i] = s * xp + c * xq;
    }
}

/// Fills the columns of `m` not listed in `built` with unit vectors
/// orthogonal to all existing ones (Gram-Schmidt over the standard basis,
/// projected twice for stability).
fn complete_orthonormal(m: &mut Mat, built: &mut Vec<usize>) {
    let rows = m.rows();
    let cols = m.cols();
    let mut next_candidate = 0;
    for k in 0..cols {
        if built.contains(&k) {
            continue;
        }
        'candidates: while next_candidate < rows {
            let e = next_candidate;
            next_candidate += 1;
            let mut w = vec![0.0; rows];
            w[e] = 1.0;
            for _ in 0..2 {
                for &b in built.iter() {
                    let proj: f64 = (0..rows).map(|i| w[i] * m.get(i, b)).sum();
                    for i in 0..rows {
                        w[i] -= proj * m.get(i, b);
                    }
                }
            }
            let nw = norm(&w);
            if nw < 1e-6 {
                continue 'candidates;
            }
            for i in 0..rows {
                m.set(i, k, w[i] / nw);
            }
            built.push(k);
            break;
        }
    }
}

/// Flips each (left, right) column pair so the largest-magnitude entry of
/// the right singular vector is positive.
fn apply_sign_convention(mut f: SvdFactors) -> SvdFactors {
    let d = f.right.rows();
    let n = f.left.rows();
    for k in 0..f.singular_values.len() {
        let mut imax = 0;
        let mut best = 0.0;
        for i in 0..d {
            let a = f.right.get(i, k).abs();
            if a > best {
                best = a;
                imax = i;
            }
        }
        if f.right.get(imax, k) < 0.0 {
            for i in 0..d {
                f.right.set(i, k, -f.right.get(i, k));
            }
            for i in 0..n {
                f.left.set(i, k, -f.left.get(i, k));
            }
        }
    }
    f
}

/// Orthonormal d×d basis whose leading r columns are the right singular
/// vectors of W; the remainder spans the null space of W^T W.
pub fn right_singular_basis(w: &EmbeddingMatrix) -> Result<Mat> {
    let factors = svd(w)?;
    let d = w.dim();
    let r = factors.singular_values.len();
    let mut basis = Mat::zeros(d, d);
    for k in 0..r {
        for i in 0..d {
            basis.set(i, k, factors.right.get(i, k));
        }
    }
    let mut built: Vec<usize> = (0..r).collect();
    complete_orthonormal(&mut basis, &mut built);
    // Same sign convention for the appended null-space vectors.
    for k in r..d {
        let mut imax = 0;
        let mut best = 0.0;
        for i in 0..d {
            let a = basis.get(i, k).abs();
            if a > best {
                best = a;
                imax = i;
            }
        }
        if basis.get(imax, k) < 0.0 {
            for i in 0..d {
                basis.set(i, k, -basis.get(i, k));
            }
        }
    }
    Ok(basis)
}

/// The 2d signed unit eigenvectors of W^T W (both signs of every right
/// singular vector), used as partition-function probes.
pub fn gram_eigvectors(w: &EmbeddingMatrix) -> Result<ProbeSet> {
    let basis = right_singular_basis(w)?;
    let d = w.dim();
    let mut probes = Vec::with_capacity(2 * d);
    for k in 0..d {
        let v = basis.col(k);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        probes.push(v);
        probes.push(neg);
    }
    ProbeSet::new(probes)
}
