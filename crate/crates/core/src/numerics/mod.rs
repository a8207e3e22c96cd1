//! Dense linear-algebra kernels: full SVD, Householder QR with greedy column
//! pivoting, and a covariance-weighted constrained least-squares solver.

mod cwls;
mod qr;
mod svd;

pub use cwls::{solve_cwls, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE, ConstraintMode, CwlsProblem, CwlsSolution, SignConstraint, SolveStatus};
pub use qr::{qr_full, qr_pivot, PivotStep, PivotedQr};
pub use svd::{svd, SvdResult};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::arg(format!("{what} contains non-finite entries")))
    }
}

/// Minimum-norm least-squares solution of `a x = b` through a thin SVD,
/// discarding singular values below `max(rows, cols) * eps * s_max`.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return DVector::zeros(cols);
    }
    let dec = nalgebra::linalg::SVD::new(a.clone(), true, true);
    let s_max = dec.singular_values.max();
    if s_max == 0.0 {
        return DVector::zeros(cols);
    }
    let cutoff = rows.max(cols) as f64 * f64::EPSILON * s_max;
    let u = dec.u.as_ref().expect("u requested");
    let v_t = dec.v_t.as_ref().expect("v_t requested");
    let mut coeffs = u.transpose() * b;
    for (c, &s) in coeffs.iter_mut().zip(dec.singular_values.iter()) {
        *c = if s > cutoff { *c / s } else { 0.0 };
    }
    v_t.transpose() * coeffs
}

/// Solves the symmetric system `(m + ridge I) x = rhs` with an eigen-decomposition,
/// pseudo-inverting eigenvalues that are numerically zero.
pub(crate) fn solve_symmetric(m: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut sym = m.clone();
    for i in 0..n {
        sym[(i, i)] += ridge;
    }
    let eig = nalgebra::linalg::SymmetricEigen::new(sym);
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cutoff = n.max(1) as f64 * f64::EPSILON * lam_max;
    let mut proj = eig.eigenvectors.transpose() * rhs;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let scale = if lam > cutoff { 1.0 / lam } else { 0.0 };
        proj.row_mut(i).scale_mut(scale);
    }
    &eig.eigenvectors * proj
}
