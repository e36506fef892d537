use alloc::vec::Vec;

use super::math::{dot, sqrt};
use super::Matrix;
use crate::{Error, Result};

/// Relative rank threshold: singular values at or below `DEFAULT_RANK_TOL * σ_max`
/// count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

/// Orthonormal basis of the null space of a constraint matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpace {
    /// `cols(A) × (cols(A) − rank)`, one unit-norm solution per column.
    pub basis: Matrix,
    pub rank: usize,
    /// All `cols(A)` singular values in descending order.
    pub singular_values: Vec<f64>,
}

/// One-sided (Hestenes) Jacobi SVD of `a`.
///
/// Returns the column norms of `a·V` (the singular values, unsorted) and the
/// full `n × n` right factor `V`, stored transposed so each row is a right
/// singular vector.
fn jacobi_right(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.cols();
    // Work on Aᵀ so that columns of A are contiguous rows.
    let mut w = a.transpose();
    let mut vt = Matrix::identity(n);
    let m = a.rows();
    // columns below this are rounding noise; rotating them against each other
    // never settles
    let fro = a.frobenius_norm();
    let negligible = (n as f64 * f64::EPSILON * fro) * (n as f64 * f64::EPSILON * fro);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(w.row(p), w.row(p));
                let beta = dot(w.row(q), w.row(q));
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(w.row(p), w.row(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + sqrt(1.0 + zeta * zeta));
                let c = 1.0 / sqrt(1.0 + t * t);
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s, m);
                rotate_rows(&mut vt, p, q, c, s, n);
            }
        }
        if !rotated {
            break;
        }
    }
    let sv = (0..n).map(|j| sqrt(dot(w.row(j), w.row(j)))).collect();
    (sv, vt)
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64, len: usize) {
    for k in 0..len {
        let xp = m[(p, k)];
        let xq = m[(q, k)];
        m[(p, k)] = c * xp - s * xq;
        m[(q, k)] = s * xp + c * xq;
    }
}

/// Singular values of `a` (all `cols(a)` of them, descending).
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let (mut sv, _) = jacobi_right(a);
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Null space of `a` via a full SVD.
///
/// The rank counts singular values strictly above `rank_tol · σ_max`; the
/// remaining right singular vectors are returned as columns, each rescaled to
/// unit ℓ2 norm.
pub fn nullspace(a: &Matrix, rank_tol: f64) -> Result<NullSpace> {
    let n = a.cols();
    if n == 0 {
        return Err(Error::InvalidArgument("constraint matrix has zero columns".into()));
    }
    if !(rank_tol > 0.0) {
        return Err(Error::InvalidArgument("rank_tol must be positive".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("constraint matrix".into()));
    }

    let (sv, vt) = jacobi_right(a);
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    let cutoff = rank_tol * sigma_max;
    let null_idx: Vec<usize> = (0..n).filter(|&j| sv[j] <= cutoff).collect();
    let rank = n - null_idx.len();
    if null_idx.is_empty() {
        return Err(Error::NullSpaceEmpty { rank, dim: n });
    }

    let mut basis = Matrix::zeros(n, null_idx.len());
    for (col, &j) in null_idx.iter().enumerate() {
        let v = vt.row(j);
        let norm = sqrt(dot(v, v));
        for i in 0..n {
            basis[(i, col)] = v[i] / norm;
        }
    }

    let mut singular_values = sv;
    singular_values.sort_by(|x, y| y.total_cmp(x));
    Ok(NullSpace {
        basis,
        rank,
        singular_values,
    })
}
