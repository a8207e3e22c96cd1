use nalgebra::{DMatrix, DVector};

use super::ensure_finite;
use crate::error::Result;

/// Relative gap below which two residual column norms count as tied.
const TIE_RTOL: f64 = 1e-12;

/// One step of greedy column pivoting: the residual norm of the column that
/// was chosen and the largest residual norm among the columns left behind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotStep {
    pub chosen_norm: f64,
    pub best_unchosen_norm: f64,
}

/// `M P = Q R` with `P` given as `pivot_order` (0-based original column
/// indices in factored order).
#[derive(Debug, Clone)]
pub struct PivotedQr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub pivot_order: Vec<usize>,
    pub certificate: Vec<PivotStep>,
}

impl PivotedQr {
    /// `M` with its columns permuted into `pivot_order`.
    pub fn permuted(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, self.pivot_order[j])])
    }
}

/// Householder QR with greedy max-residual-norm column pivoting.
///
/// Each of the `min(rows, cols)` steps moves the remaining column with the
/// largest residual norm into place; ties go to the lowest original column
/// index. Columns that are never chosen keep their post-swap relative order.
pub fn qr_pivot(m: &DMatrix<f64>) -> Result<PivotedQr> {
    ensure_finite(m, "qr input")?;
    Ok(householder(m, true))
}

/// Unpivoted Householder QR with a square `Q`.
pub fn qr_full(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let f = householder(m, false);
    (f.q, f.r)
}

fn householder(m: &DMatrix<f64>, pivot: bool) -> PivotedQr {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut q = DMatrix::<f64>::identity(rows, rows);
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut certificate = Vec::new();
    let steps = rows.min(cols);

    for j in 0..steps {
        if pivot {
            let norms: Vec<f64> = (j..cols)
                .map(|c| a.view((j, c), (rows - j, 1)).norm())
                .collect();
            let top = norms.iter().cloned().fold(0.0f64, f64::max);
            let best = (0..norms.len())
                .filter(|&off| top - norms[off] <= TIE_RTOL * top)
                .min_by_key(|&off| perm[j + off])
                .expect("at least one candidate column");
            let chosen_norm = norms[best];
            let best_unchosen_norm = norms
                .iter()
                .enumerate()
                .filter(|&(off, _)| off != best)
                .map(|(_, &v)| v)
                .fold(0.0f64, f64::max);
            certificate.push(PivotStep {
                chosen_norm,
                best_unchosen_norm,
            });
            if best != 0 {
                a.swap_columns(j, j + best);
                perm.swap(j, j + best);
            }
        }

        let x: DVector<f64> = a.view((j, j), (rows - j, 1)).column(0).into_owned();
        let norm_x = x.norm();
        if norm_x == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm_x } else { norm_x };
        let mut v = x;
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        let tau = 2.0 / vnorm2;

        // A[j.., j..] -= tau v (v^T A[j.., j..])
        {
            let mut block = a.view_mut((j, j), (rows - j, cols - j));
            let w: DVector<f64> = block.tr_mul(&v).column(0).into_owned();
            block.ger(-tau, &v, &w, 1.0);
        }
        // Q[:, j..] -= tau (Q[:, j..] v) v^T
        {
            let mut block = q.view_mut((0, j), (rows, rows - j));
            let w: DVector<f64> = &block * &v;
            block.ger(-tau, &w, &v, 1.0);
        }
        a[(j, j)] = alpha;
        for i in (j + 1)..rows {
            a[(i, j)] = 0.0;
        }
    }

    PivotedQr {
        q,
        r: a,
        pivot_order: perm,
        certificate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn identity_keeps_order() {
        let f = qr_pivot(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(f.pivot_order, vec![0, 1]);
    }

    #[test]
    fn largest_column_first() {
        let m = dmatrix![0.0, 2.0; 0.0, 0.0];
        let f = qr_pivot(&m).unwrap();
        assert_eq!(f.pivot_order[0], 1);
        assert!((f.certificate[0].chosen_norm - 2.0).abs() < 1e-15);
    }

    #[test]
    fn reconstructs_permuted_input() {
        let m = dmatrix![1.0, 4.0, -2.0, 0.5; 3.0, 0.0, 1.0, 2.0; -1.0, 2.0, 2.0, 1.0];
        let f = qr_pivot(&m).unwrap();
        let mp = f.permuted(&m);
        assert!((&f.q * &f.r - &mp).abs().max() < 1e-12);
        assert!((f.q.transpose() * &f.q - DMatrix::identity(3, 3)).abs().max() < 1e-12);
        for i in 1..3 {
            assert!(f.r[(i - 1, i - 1)].abs() >= f.r[(i, i)].abs());
        }
        // Factoring the permuted matrix without pivoting gives the same R up to row signs.
        let (_, r2) = qr_full(&mp);
        for i in 0..3 {
            let sign = if (r2[(i, i)] >= 0.0) == (f.r[(i, i)] >= 0.0) { 1.0 } else { -1.0 };
            for j in 0..4 {
                assert!((sign * r2[(i, j)] - f.r[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wide_input_has_full_square_q() {
        let m = dmatrix![1.0, 2.0, 3.0];
        let f = qr_pivot(&m).unwrap();
        assert_eq!(f.q.shape(), (1, 1));
        assert_eq!(f.pivot_order, vec![2, 1, 0]);
    }

    #[test]
    fn rejects_nan() {
        let m = dmatrix![1.0, f64::NAN];
        assert!(qr_pivot(&m).is_err());
    }
}
