//! Link ranking by SVD plus column-pivoted QR of the compressed matrix, and
//! slicing of the monitored subsystem.

use nalgebra::{DMatrix, DVector};

use crate::demand::CompressedMeasurement;
use crate::error::{Error, Result};
use crate::numerics::{qr_pivot, svd};

/// A ranking of all `m` links; the first `s` are monitored. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSelection {
    pivot_order: Vec<usize>,
    monitored_count: usize,
}

impl LinkSelection {
    pub fn new(pivot_order: Vec<usize>, monitored_count: usize) -> Result<Self> {
        let m = pivot_order.len();
        let mut seen = vec![false; m];
        for &l in &pivot_order {
            if l >= m || std::mem::replace(&mut seen[l], true) {
                return Err(Error::arg("pivot order is not a permutation"));
            }
        }
        if monitored_count == 0 || monitored_count > m {
            return Err(Error::arg(format!("monitored count {monitored_count} outside 1..={m}")));
        }
        Ok(LinkSelection {
            pivot_order,
            monitored_count,
        })
    }

    /// Every link monitored, in index order.
    pub fn all(m: usize) -> Result<Self> {
        LinkSelection::new((0..m).collect(), m)
    }

    pub fn pivot_order(&self) -> &[usize] {
        &self.pivot_order
    }

    pub fn monitored_count(&self) -> usize {
        self.monitored_count
    }

    pub fn link_count(&self) -> usize {
        self.pivot_order.len()
    }

    /// Monitored links, in rank order.
    pub fn monitored(&self) -> &[usize] {
        &self.pivot_order[..self.monitored_count]
    }

    /// Monitored-link mask indexed by link.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.link_count()];
        for &l in self.monitored() {
            mask[l] = true;
        }
        mask
    }

    /// Values of the monitored links, in rank order.
    pub fn gather(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.link_count() {
            return Err(Error::arg(format!("vector has {} entries, expected {}", v.len(), self.link_count())));
        }
        Ok(DVector::from_iterator(self.monitored_count, self.monitored().iter().map(|&l| v[l])))
    }

    /// Writes `values` (rank order) onto the monitored positions of `base`.
    pub fn scatter(&self, values: &DVector<f64>, base: &DVector<f64>) -> Result<DVector<f64>> {
        if values.len() != self.monitored_count || base.len() != self.link_count() {
            return Err(Error::arg("scatter dimensions do not match the selection"));
        }
        let mut out = base.clone();
        for (k, &l) in self.monitored().iter().enumerate() {
            out[l] = values[k];
        }
        Ok(out)
    }
}

/// Ranks links by pivoted QR of the transposed leading `s` left singular
/// vectors of `phi` and monitors the first `s`.
///
/// When `s` exceeds the rank of `phi` the trailing singular vectors come from
/// the deterministic completion of the full SVD.
pub fn select_links(phi: &CompressedMeasurement, s: usize) -> Result<LinkSelection> {
    let m = phi.link_count();
    if s == 0 || s > m {
        return Err(Error::arg(format!("monitored count {s} outside 1..={m}")));
    }
    let dec = svd(phi.matrix())?;
    let u_k_t = dec.u.columns(0, s).transpose();
    let f = qr_pivot(&u_k_t)?;
    LinkSelection::new(f.pivot_order, s)
}

/// Monitored rows of `y` and `phi` in rank order.
pub fn slice_system(sel: &LinkSelection, y: &DVector<f64>, phi: &CompressedMeasurement) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if phi.link_count() != sel.link_count() {
        return Err(Error::arg(format!(
            "compressed matrix has {} rows, selection covers {} links",
            phi.link_count(),
            sel.link_count()
        )));
    }
    let y_s = sel.gather(y)?;
    let p = phi.matrix();
    let phi_s = DMatrix::from_fn(sel.monitored_count(), p.ncols(), |k, j| p[(sel.monitored()[k], j)]);
    Ok((y_s, phi_s))
}
