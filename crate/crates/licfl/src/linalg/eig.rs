//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::Matrix;
use crate::error::{Error, Result};

/// Sweep cap; well-conditioned symmetric matrices converge in well under ten.
const MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm.
const OFF_DIAG_TOL: f64 = 1e-10;
/// Largest tolerated `|a_ij - a_ji|` on input.
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenpairs of a symmetric matrix.
///
/// `values` are sorted non-increasing and column `i` of `vectors` is the
/// eigenvector paired with `values[i]`. Columns are orthonormal and sign
/// canonicalized: the largest-magnitude entry of each column is positive
/// (ties broken by lowest index), so repeated runs agree bitwise.
#[derive(Debug, Clone)]
pub struct EigResult {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigResult {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Full eigendecomposition of a square symmetric matrix.
///
/// Cyclic Jacobi: repeatedly annihilates each off-diagonal element with a
/// plane rotation, accumulating the rotations into the eigenvector matrix.
pub fn sym_eig(m: &Matrix) -> Result<EigResult> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "sym_eig requires a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(format!(
            "sym_eig requires a symmetric matrix, max |a_ij - a_ji| = {asym:.3e}"
        )));
    }

    let n = m.rows();
    if n == 0 {
        return Ok(EigResult {
            values: Vec::new(),
            vectors: Matrix::zeros(0, 0),
        });
    }

    // Work on a symmetrized copy so rotations see an exactly symmetric matrix.
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }
    let mut v = Matrix::identity(n);

    let mut converged = false;
    let mut residual = off_diag_norm(&a);
    for _ in 0..MAX_SWEEPS {
        if residual < OFF_DIAG_TOL {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (c, s) = rotation(a.get(p, p), a.get(q, q), apq);
                apply_rotation(&mut a, &mut v, p, q, c, s);
            }
        }
        residual = off_diag_norm(&a);
    }
    if !converged && residual >= OFF_DIAG_TOL {
        return Err(Error::numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps; \
             off-diagonal residual {residual:.3e}"
        )));
    }

    // Sort descending by eigenvalue, permuting eigenvector columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set(row, dst, v.get(row, src));
        }
    }
    canonicalize_columns(&mut vectors);

    Ok(EigResult { values, vectors })
}

/// First `k` eigenpairs of an already-computed decomposition.
pub fn top_k_pairs(e: &EigResult, k: usize) -> Result<(Vec<f64>, Matrix)> {
    let n = e.dim();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "top_k_pairs requires 1 <= k <= {n}, got {k}"
        )));
    }
    let values = e.values[..k].to_vec();
    let mut vectors = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            vectors.set(i, j, e.vectors.get(i, j));
        }
    }
    Ok((values, vectors))
}

/// Flips each column so its largest-magnitude entry (lowest index on ties)
/// is positive.
pub(crate) fn canonicalize_columns(m: &mut Matrix) {
    for j in 0..m.cols() {
        let mut idx = 0;
        let mut best = 0.0f64;
        for i in 0..m.rows() {
            let mag = m.get(i, j).abs();
            if mag > best {
                best = mag;
                idx = i;
            }
        }
        if m.get(idx, j) < 0.0 {
            for i in 0..m.rows() {
                let v = m.get(i, j);
                m.set(i, j, -v);
            }
        }
    }
}

fn off_diag_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a.get(i, j) * a.get(i, j);
            }
        }
    }
    sum.sqrt()
}

/// Cosine and sine of the rotation annihilating `a_pq`.
fn rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        // Avoid overflow in theta^2; rotation is then effectively tiny.
        1.0 / (2.0 * theta)
    } else {
        let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
        sign / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    (c, t * c)
}

fn apply_rotation(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let apq = a.get(p, q);

    a.set(p, p, c * c * app - 2.0 * s * c * apq + s * s * aqq);
    a.set(q, q, s * s * app + 2.0 * s * c * apq + c * c * aqq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);

    for i in 0..n {
        if i != p && i != q {
            let aip = a.get(i, p);
            let aiq = a.get(i, q);
            a.set(i, p, c * aip - s * aiq);
            a.set(p, i, c * aip - s * aiq);
            a.set(i, q, s * aip + c * aiq);
            a.set(q, i, s * aip + c * aiq);
        }
    }
    for i in 0..n {
        let vip = v.get(i, p);
        let viq = v.get(i, q);
        v.set(i, p, c * vip - s * viq);
        v.set(i, q, s * vip + c * viq);
    }
}
