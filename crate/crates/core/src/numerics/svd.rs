use nalgebra::{DMatrix, DVector};

use super::{ensure_finite, qr_full};
use crate::error::{Error, Result};

/// Full singular value decomposition `M = U diag(S) V^T`.
///
/// `u` is `rows x rows`, `v` is `cols x cols`, and `singular_values` holds the
/// `min(rows, cols)` singular values in nonincreasing order. Columns of `U`
/// beyond `min(rows, cols)` (and of `V` likewise) are a deterministic
/// orthonormal completion.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdResult {
    /// Number of singular values above `rel_tol * s_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let s_max = self.singular_values.iter().cloned().fold(0.0, f64::max);
        if s_max == 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .filter(|&&s| s > rel_tol * s_max)
            .count()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let (rows, cols) = (self.u.nrows(), self.v.nrows());
        let r = self.singular_values.len();
        let mut us = self.u.columns(0, r).clone_owned();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        let out = us * self.v.columns(0, r).transpose();
        debug_assert_eq!(out.shape(), (rows, cols));
        out
    }

    /// Singular values divided by the largest one (all zeros stay zero).
    pub fn normalized_spectrum(&self) -> Vec<f64> {
        let s_max = self.singular_values.iter().cloned().fold(0.0, f64::max);
        self.singular_values
            .iter()
            .map(|&s| if s_max > 0.0 { s / s_max } else { 0.0 })
            .collect()
    }
}

/// Full SVD with a fixed sign convention: the largest-magnitude entry of every
/// column of `U` is nonnegative (first occurrence wins ties), with the matching
/// column of `V` flipped alongside. Completion columns of `V` follow the same
/// rule on their own.
pub fn svd(m: &DMatrix<f64>) -> Result<SvdResult> {
    ensure_finite(m, "svd input")?;
    let (rows, cols) = m.shape();
    let r = rows.min(cols);
    if r == 0 {
        return Ok(SvdResult {
            u: DMatrix::identity(rows, rows),
            singular_values: DVector::zeros(0),
            v: DMatrix::identity(cols, cols),
        });
    }

    let dec = nalgebra::linalg::SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::arg("svd did not converge"))?;
    let u_thin = dec.u.expect("u requested");
    let v_thin = dec.v_t.expect("v_t requested").transpose();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        dec.singular_values[b]
            .partial_cmp(&dec.singular_values[a])
            .expect("finite singular values")
            .then(a.cmp(&b))
    });
    let singular_values = DVector::from_iterator(r, order.iter().map(|&i| dec.singular_values[i]));
    let u_sorted = DMatrix::from_fn(rows, r, |i, j| u_thin[(i, order[j])]);
    let v_sorted = DMatrix::from_fn(cols, r, |i, j| v_thin[(i, order[j])]);

    let mut u = complete_basis(&u_sorted);
    let mut v = complete_basis(&v_sorted);

    for j in 0..rows {
        if leading_sign(&u, j) < 0.0 {
            u.column_mut(j).neg_mut();
            if j < r {
                v.column_mut(j).neg_mut();
            }
        }
    }
    for j in r..cols {
        if leading_sign(&v, j) < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }

    Ok(SvdResult {
        u,
        singular_values,
        v,
    })
}

fn leading_sign(m: &DMatrix<f64>, col: usize) -> f64 {
    let mut best = 0.0f64;
    for &x in m.column(col).iter() {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    best
}

/// Extends orthonormal columns to a square orthogonal matrix using the
/// trailing columns of a Householder QR of the input.
fn complete_basis(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = cols.shape();
    if k == n {
        return cols.clone();
    }
    let (q, _) = qr_full(cols);
    let mut out = DMatrix::zeros(n, n);
    out.columns_mut(0, k).copy_from(cols);
    out.columns_mut(k, n - k).copy_from(&q.columns(k, n - k));
    out
}
