//! Demand fractions `Psi`, the compressed matrix `Phi = A Psi`, and the affine
//! regressors that predict `Psi` from link loads.

use std::fs;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::format_value;
use crate::netmodel::{od_col, LinkSeries, RoutingMatrix};
use crate::numerics::{solve_symmetric, svd};

/// Whether a source's traffic to itself counts towards its demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelfFlowPolicy {
    #[default]
    Exclude,
    /// For routings where self flows cross links.
    Include,
}

impl SelfFlowPolicy {
    /// Whether OD pair `(src, dst)` can carry a nonzero fraction.
    pub fn admits(self, src: usize, dst: usize) -> bool {
        self == SelfFlowPolicy::Include || src != dst
    }

    fn destinations(self, n: usize) -> usize {
        match self {
            SelfFlowPolicy::Exclude => n - 1,
            SelfFlowPolicy::Include => n,
        }
    }
}

/// `n^2 x n` matrix of per-source destination fractions. Row `(j, d)` may only
/// be nonzero in column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTransform {
    node_count: usize,
    matrix: DMatrix<f64>,
}

impl DemandTransform {
    pub fn new(node_count: usize, matrix: DMatrix<f64>) -> Result<Self> {
        let n = node_count;
        if matrix.shape() != (n * n, n) {
            return Err(Error::arg(format!("demand transform must be {}x{n}", n * n)));
        }
        for i in 0..n * n {
            for j in 0..n {
                let v = matrix[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::arg(format!("fraction {v} outside [0, 1]")));
                }
                if v != 0.0 && i / n != j {
                    return Err(Error::arg(format!("row {} has a fraction outside its source column", i + 1)));
                }
            }
        }
        Ok(DemandTransform { node_count, matrix })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Fraction of source `src`'s demand sent to `dst` (0-based nodes).
    pub fn fraction(&self, src: usize, dst: usize) -> f64 {
        self.matrix[(od_col(src, dst, self.node_count), src)]
    }

    /// Sum of the fractions of every source.
    pub fn source_sums(&self) -> Vec<f64> {
        (0..self.node_count).map(|j| self.matrix.column(j).sum()).collect()
    }

    /// The potential nonzero of every row, as an `n^2` vector.
    pub fn fractions(&self) -> DVector<f64> {
        let n = self.node_count;
        DVector::from_fn(n * n, |i, _| self.matrix[(i, i / n)])
    }

    fn from_fractions(n: usize, p: &DVector<f64>) -> Self {
        let mut matrix = DMatrix::zeros(n * n, n);
        for i in 0..n * n {
            matrix[(i, i / n)] = p[i];
        }
        DemandTransform { node_count: n, matrix }
    }

    /// OD flows `Psi x_c` for source demands `x_c`.
    pub fn apply(&self, source_demands: &DVector<f64>) -> DVector<f64> {
        &self.matrix * source_demands
    }
}

/// Per-source destination fractions of one traffic snapshot. A source with no
/// demand spreads uniformly over its destinations.
pub fn build_psi(x: &DVector<f64>, n: usize, policy: SelfFlowPolicy) -> Result<DemandTransform> {
    if n < 2 || x.len() != n * n {
        return Err(Error::arg(format!("traffic vector has {} entries, expected {}", x.len(), n * n)));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::arg(format!("traffic value {v} is negative or non-finite")));
    }
    let mut p = DVector::zeros(n * n);
    for j in 0..n {
        let total: f64 = (0..n).filter(|&d| policy.admits(j, d)).map(|d| x[od_col(j, d, n)]).sum();
        for d in (0..n).filter(|&d| policy.admits(j, d)) {
            p[od_col(j, d, n)] = if total > 0.0 {
                x[od_col(j, d, n)] / total
            } else {
                1.0 / policy.destinations(n) as f64
            };
        }
    }
    Ok(DemandTransform::from_fractions(n, &p))
}

/// `m x n` matrix `A Psi`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMeasurement {
    matrix: DMatrix<f64>,
}

impl CompressedMeasurement {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn link_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn node_count(&self) -> usize {
        self.matrix.ncols()
    }

    /// Wraps an arbitrary `m x n` matrix, for selection experiments.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.is_empty() || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("compressed matrix must be nonempty and finite"));
        }
        Ok(CompressedMeasurement { matrix })
    }
}

pub fn build_phi(a: &RoutingMatrix, psi: &DemandTransform) -> Result<CompressedMeasurement> {
    if a.node_count() != psi.node_count() {
        return Err(Error::arg(format!(
            "routing is for n={}, demand transform for n={}",
            a.node_count(),
            psi.node_count()
        )));
    }
    Ok(CompressedMeasurement {
        matrix: a.matrix() * psi.matrix(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorOptions {
    pub policy: SelfFlowPolicy,
    /// Huber reweighting on top of least squares.
    pub robust: bool,
    /// Huber constant in units of the normalised MAD of the residuals.
    pub huber_k: f64,
    pub max_reweights: usize,
}

impl Default for RegressorOptions {
    fn default() -> Self {
        RegressorOptions {
            policy: SelfFlowPolicy::Exclude,
            robust: true,
            huber_k: 1.345,
            max_reweights: 50,
        }
    }
}

/// Affine maps `[1; Y] -> Psi row`, one column of `beta` per OD row.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandRegressor {
    node_count: usize,
    beta: DMatrix<f64>,
    fitted: Vec<bool>,
}

/// Singular values below this fraction of the largest are treated as zero
/// when fitting, so collinear links do not blow up the coefficients.
const RANK_RTOL: f64 = 1e-10;

impl DemandRegressor {
    pub fn new(node_count: usize, beta: DMatrix<f64>, fitted: Vec<bool>) -> Result<Self> {
        let n2 = node_count * node_count;
        if beta.ncols() != n2 || fitted.len() != n2 || beta.nrows() < 2 {
            return Err(Error::arg("beta must be (m+1) x n^2 with one fitted flag per column"));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("beta has non-finite entries"));
        }
        if (0..n2).any(|i| !fitted[i] && beta.column(i).iter().any(|&v| v != 0.0)) {
            return Err(Error::arg("unfitted beta columns must be zero"));
        }
        Ok(DemandRegressor { node_count, beta, fitted })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn link_count(&self) -> usize {
        self.beta.nrows() - 1
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn fitted(&self) -> &[bool] {
        &self.fitted
    }

    /// Writes `beta.csv` and `fitted.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let beta: String = self
            .beta
            .row_iter()
            .map(|r| r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        let p = dir.join("beta.csv");
        fs::write(&p, beta).map_err(|e| Error::io(&p, e))?;
        let fitted = self.fitted.iter().map(|&f| if f { "1" } else { "0" }).collect::<Vec<_>>().join(",") + "\n";
        let p = dir.join("fitted.csv");
        fs::write(&p, fitted).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path, node_count: usize) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<Vec<String>>> {
            let p = dir.join(name);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
                .collect())
        };
        let rows = read("beta.csv")?;
        let n2 = node_count * node_count;
        let mut beta = DMatrix::zeros(rows.len(), n2);
        for (r, fields) in rows.iter().enumerate() {
            if fields.len() != n2 {
                return Err(Error::parse(dir.join("beta.csv"), r + 1, format!("expected {n2} values")));
            }
            for (c, f) in fields.iter().enumerate() {
                beta[(r, c)] = f
                    .parse()
                    .map_err(|_| Error::parse(dir.join("beta.csv"), r + 1, format!("'{f}' is not a number")))?;
            }
        }
        let flags = read("fitted.csv")?;
        let fitted = flags
            .first()
            .ok_or_else(|| Error::parse(dir.join("fitted.csv"), 1, "empty file"))?
            .iter()
            .map(|f| match f.as_str() {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::parse(dir.join("fitted.csv"), 1, format!("'{f}' is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        DemandRegressor::new(node_count, beta, fitted)
    }
}

/// Fits one affine regressor per admissible OD row of `Psi` against the link
/// loads of the same timestamps.
///
/// The link columns are standardised (constant links dropped) and projected on
/// their leading singular subspace, which keeps the fit stable when links are
/// collinear. With fewer samples than coefficients a small ridge term is added.
pub fn train_regressor(y: &LinkSeries, psis: &[DemandTransform], opts: &RegressorOptions) -> Result<DemandRegressor> {
    let t_len = y.len();
    if t_len != psis.len() {
        return Err(Error::Training(format!("{t_len} link samples but {} demand transforms", psis.len())));
    }
    if t_len < 2 {
        return Err(Error::Training("need at least two training samples".into()));
    }
    let n = psis[0].node_count();
    if psis.iter().any(|p| p.node_count() != n) {
        return Err(Error::Training("demand transforms disagree on n".into()));
    }
    let m = y.values.ncols();
    if y.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("link loads contain non-finite values".into()));
    }

    let mean: Vec<f64> = (0..m).map(|l| y.values.column(l).mean()).collect();
    let scale: Vec<f64> = (0..m)
        .map(|l| {
            let c = y.values.column(l);
            (c.iter().map(|v| (v - mean[l]).powi(2)).sum::<f64>() / t_len as f64).sqrt()
        })
        .collect();
    let active: Vec<usize> = (0..m)
        .filter(|&l| scale[l] > 1e-12 * (1.0 + mean[l].abs()))
        .collect();
    let design = DMatrix::from_fn(t_len, active.len() + 1, |t, c| {
        if c == 0 {
            1.0
        } else {
            let l = active[c - 1];
            (y.values[(t, l)] - mean[l]) / scale[l]
        }
    });
    let dec = svd(&design)?;
    let r = dec.rank(RANK_RTOL);
    let u_r = dec.u.columns(0, r).into_owned();
    let v_r = dec.v.columns(0, r).into_owned();
    let s_r: Vec<f64> = dec.singular_values.iter().take(r).cloned().collect();
    let underdetermined = t_len < m + 1;
    let ridge = if underdetermined {
        1e-6 * s_r.iter().map(|s| s * s).sum::<f64>() / (m + 1) as f64
    } else {
        0.0
    };
    debug!("regressor design rank {r} of {}, ridge {ridge:e}", active.len() + 1);

    let targets = DMatrix::from_fn(t_len, n * n, |t, i| psis[t].matrix()[(i, i / n)]);
    let columns: Vec<Option<DVector<f64>>> = (0..n * n)
        .into_par_iter()
        .map(|i| {
            if !opts.policy.admits(i / n, i % n) {
                return None;
            }
            let target = targets.column(i).into_owned();
            let coeff = fit_column(&u_r, &s_r, ridge, &target, opts.robust && !underdetermined, opts);
            Some(&v_r * coeff)
        })
        .collect();

    let mut beta = DMatrix::zeros(m + 1, n * n);
    let mut fitted = vec![false; n * n];
    for (i, col) in columns.into_iter().enumerate() {
        let Some(gamma) = col else { continue };
        fitted[i] = true;
        let mut intercept = gamma[0];
        for (c, &l) in active.iter().enumerate() {
            let b = gamma[c + 1] / scale[l];
            beta[(l + 1, i)] = b;
            intercept -= b * mean[l];
        }
        beta[(0, i)] = intercept;
    }
    DemandRegressor::new(n, beta, fitted)
}

/// Coefficients in the reduced basis `U_r diag(s)`, returned mapped back by
/// `diag(1/s)` so that `V_r * result` is the coefficient vector of the design.
fn fit_column(u: &DMatrix<f64>, s: &[f64], ridge: f64, target: &DVector<f64>, robust: bool, opts: &RegressorOptions) -> DVector<f64> {
    let r = s.len();
    let shrink = |c: &DVector<f64>| DVector::from_fn(r, |k, _| c[k] * s[k] / (s[k] * s[k] + ridge));
    let proj = u.tr_mul(target);
    let mut coeff = shrink(&proj);
    if !robust || r == 0 {
        return coeff;
    }
    let scale_target = 1.0 + target.amax();
    let mut c = proj;
    for _ in 0..opts.max_reweights {
        let resid = target - u * &c;
        let sigma = mad(resid.as_slice()) / 0.6745;
        if sigma <= 1e-12 * scale_target {
            break;
        }
        let k = opts.huber_k * sigma;
        let w = resid.map(|e| if e.abs() <= k { 1.0 } else { k / e.abs() });
        let mut uw = u.clone();
        for (t, &wt) in w.iter().enumerate() {
            uw.row_mut(t).scale_mut(wt);
        }
        let gram = u.tr_mul(&uw);
        let rhs = DMatrix::from_column_slice(r, 1, uw.tr_mul(target).as_slice());
        let next = solve_symmetric(&gram, &rhs, 0.0).column(0).into_owned();
        let change = (&next - &c).amax();
        c = next;
        if change <= 1e-12 * (1.0 + c.amax()) {
            break;
        }
    }
    coeff.copy_from(&shrink(&c));
    coeff
}

fn mad(values: &[f64]) -> f64 {
    let med = median(values.to_vec());
    median(values.iter().map(|v| (v - med).abs()).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PredictOptions {
    /// Rescale every source's fractions to sum to 1 after clamping.
    pub renormalize: bool,
    pub policy: SelfFlowPolicy,
}

/// `Psi` predicted from link loads: affine map, clamped to `[0, 1]`.
pub fn predict_psi(reg: &DemandRegressor, y_hat: &DVector<f64>, opts: PredictOptions) -> Result<DemandTransform> {
    if y_hat.len() != reg.link_count() {
        return Err(Error::arg(format!("{} link values, regressor expects {}", y_hat.len(), reg.link_count())));
    }
    if y_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("link values must be finite"));
    }
    let n = reg.node_count();
    let slopes = reg.beta.rows(1, reg.link_count());
    let raw = slopes.tr_mul(y_hat) + reg.beta.row(0).transpose();
    let mut p = DVector::from_fn(n * n, |i, _| if reg.fitted[i] { raw[i].clamp(0.0, 1.0) } else { 0.0 });
    if opts.renormalize {
        for j in 0..n {
            let cols: Vec<usize> = (0..n).filter(|&d| opts.policy.admits(j, d)).map(|d| od_col(j, d, n)).collect();
            let total: f64 = cols.iter().map(|&c| p[c]).sum();
            for &c in &cols {
                p[c] = if total > 0.0 { p[c] / total } else { 1.0 / cols.len() as f64 };
            }
        }
    }
    Ok(DemandTransform::from_fractions(n, &p))
}

/// Writes `Psi` as CSV rows `od,source,fraction` for its nonzero entries.
pub fn write_psi(path: &Path, psi: &DemandTransform) -> Result<()> {
    let n = psi.node_count();
    let mut text = String::from("od,source,fraction\n");
    for i in 0..n * n {
        let v = psi.matrix[(i, i / n)];
        if v != 0.0 {
            text.push_str(&format!("{},{},{}\n", i + 1, i / n + 1, format_value(v)));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
