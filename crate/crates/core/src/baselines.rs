//! Static-basis comparison methods: PCA, CUR and a noisy prior-mean (PME)
//! demand basis. All of them monitor every link and reuse the estimator's solver.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::demand::{build_psi, DemandTransform, SelfFlowPolicy};
use crate::error::{Error, Result};
use crate::estimator::{prior_xc, weight_matrix, RunTrace, StepResult};
use crate::netmodel::{LinkSeries, RoutingMatrix, TrafficSeries};
use crate::numerics::{lstsq_min_norm, qr_pivot, solve_cwls, svd, ConstraintMode, CwlsProblem, SignConstraint, SolveStatus};
use crate::subset::LinkSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Pca,
    Cur,
    Pme,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Pca => "pca",
            BaselineKind::Cur => "cur",
            BaselineKind::Pme => "pme",
        }
    }
}

/// A fixed `n^2 x k` basis and its image `A * basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticBasis {
    pub kind: BaselineKind,
    pub psi_static: DMatrix<f64>,
    pub phi_static: DMatrix<f64>,
    /// Offset added back after reconstruction (the training mean, PCA only).
    pub mean: Option<DVector<f64>>,
}

impl StaticBasis {
    fn new(kind: BaselineKind, a: &RoutingMatrix, psi_static: DMatrix<f64>, mean: Option<DVector<f64>>) -> Result<Self> {
        if psi_static.nrows() != a.matrix().ncols() {
            return Err(Error::arg("basis rows do not match the routing's OD count"));
        }
        let phi_static = a.matrix() * &psi_static;
        Ok(StaticBasis {
            kind,
            psi_static,
            phi_static,
            mean,
        })
    }

    pub fn k(&self) -> usize {
        self.psi_static.ncols()
    }

    /// Frobenius error of the best unconstrained fit of every training row
    /// inside the basis span (plus offset), in OD space.
    pub fn projection_error(&self, x: &TrafficSeries) -> f64 {
        let mut total = 0.0;
        for t in 0..x.len() {
            let mut target = x.row(t);
            if let Some(mu) = &self.mean {
                target -= mu;
            }
            let coeff = lstsq_min_norm(&self.psi_static, &target);
            total += (&self.psi_static * coeff - target).norm_squared();
        }
        total.sqrt()
    }
}

/// `n^2 x T` training matrix.
fn snapshots(x: &TrafficSeries) -> DMatrix<f64> {
    x.values.transpose()
}

fn check_k(k: usize, limit: usize) -> Result<()> {
    if k == 0 || k > limit {
        return Err(Error::arg(format!("component count k={k} outside 1..={limit}")));
    }
    Ok(())
}

/// Top-`k` principal directions of the mean-centred training flows.
pub fn train_pca_basis(x_train: &TrafficSeries, a: &RoutingMatrix, k: usize) -> Result<StaticBasis> {
    let m = snapshots(x_train);
    check_k(k, m.nrows().min(m.ncols()))?;
    let mean = m.column_mean();
    let mut centred = m;
    for mut col in centred.column_iter_mut() {
        col -= &mean;
    }
    let dec = svd(&centred)?;
    StaticBasis::new(BaselineKind::Pca, a, dec.u.columns(0, k).into_owned(), Some(mean))
}

/// `k` training snapshots picked by pivoted QR on the top-`k` right singular
/// vectors, each scaled to unit length.
pub fn train_cur_basis(x_train: &TrafficSeries, a: &RoutingMatrix, k: usize) -> Result<StaticBasis> {
    let m = snapshots(x_train);
    check_k(k, m.ncols())?;
    let dec = svd(&m)?;
    let f = qr_pivot(&dec.v.columns(0, k).transpose())?;
    let mut psi = DMatrix::zeros(m.nrows(), k);
    for (c, &t) in f.pivot_order.iter().take(k).enumerate() {
        let col = m.column(t);
        let norm = col.norm();
        if norm > 0.0 {
            psi.set_column(c, &(col / norm));
        }
    }
    StaticBasis::new(BaselineKind::Cur, a, psi, None)
}

/// Demand fractions of one noisy draw around the training mean:
/// `max(0, N(mu_i, (sigma_factor * mu_i)^2))` per flow.
pub fn train_pme_basis(x_train: &TrafficSeries, a: &RoutingMatrix, sigma_factor: f64, seed: u64, policy: SelfFlowPolicy) -> Result<StaticBasis> {
    if !(sigma_factor >= 0.0) || !sigma_factor.is_finite() {
        return Err(Error::arg("sigma factor must be a nonnegative number"));
    }
    if x_train.is_empty() {
        return Err(Error::arg("empty training window"));
    }
    let mean = snapshots(x_train).column_mean();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = mean.map(|mu| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (mu + sigma_factor * mu * z).max(0.0)
    });
    let psi = build_psi(&draw, x_train.node_count, policy)?;
    StaticBasis::new(BaselineKind::Pme, a, psi.matrix().clone(), None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOptions {
    /// Side constraint for PME; PCA and CUR always solve without one.
    pub constraint_mode: ConstraintMode,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub covariance_ridge: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            constraint_mode: ConstraintMode::LowerBound,
            tolerance: crate::numerics::DEFAULT_TOLERANCE,
            max_iterations: crate::numerics::DEFAULT_MAX_ITERATIONS,
            covariance_ridge: 1e-6,
        }
    }
}

/// Solves every test timestamp against the static basis with all links read.
pub fn run_baseline(basis: &StaticBasis, a: &RoutingMatrix, y_test: &LinkSeries, link_cov: &DMatrix<f64>, opts: &BaselineOptions) -> Result<RunTrace> {
    let m = a.link_count();
    if y_test.values.ncols() != m || basis.phi_static.nrows() != m || link_cov.shape() != (m, m) {
        return Err(Error::arg("baseline inputs disagree on the link count"));
    }
    let weight = weight_matrix(link_cov, opts.covariance_ridge);
    let offset = basis.mean.as_ref().map(|mu| a.matrix() * mu);
    let selection = LinkSelection::all(m)?;
    let physical = basis.kind == BaselineKind::Pme;
    let psi_hat = if physical {
        Some(DemandTransform::new(a.node_count(), basis.psi_static.clone())?)
    } else {
        None
    };

    let steps = (0..y_test.len())
        .into_par_iter()
        .map(|t| {
            let mut target = y_test.row(t);
            if let Some(o) = &offset {
                target -= o;
            }
            let mut problem = CwlsProblem::new(basis.phi_static.clone(), target.clone(), weight.clone());
            problem.tolerance = opts.tolerance;
            problem.max_iterations = opts.max_iterations;
            problem = if physical {
                problem
                    .with_mode(opts.constraint_mode)
                    .with_start(prior_xc(&basis.phi_static, &target)?)
            } else {
                problem.with_mode(ConstraintMode::None).with_sign(SignConstraint::Free)
            };
            let mut solution = solve_cwls(&problem)?;
            let mut fell_back = false;
            if matches!(solution.status, SolveStatus::Infeasible { .. }) {
                problem.constraint_mode = ConstraintMode::None;
                solution = solve_cwls(&problem)?;
                fell_back = true;
            }
            let coeff = if physical { solution.x.map(|v| v.max(0.0)) } else { solution.x };
            let mut x_hat = &basis.psi_static * &coeff;
            if let Some(mu) = &basis.mean {
                x_hat += mu;
            }
            let x_hat = x_hat.map(|v| v.max(0.0));
            let y_hat = a.matrix() * &x_hat;
            Ok(StepResult {
                t: y_test.start_index + t,
                x_hat,
                xc_hat: coeff,
                y_hat,
                psi_hat: psi_hat.clone(),
                selection: selection.clone(),
                iterations: solution.iterations,
                kkt_residual: solution.kkt_residual,
                status: solution.status,
                fell_back,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunTrace {
        steps,
        node_count: a.node_count(),
        coefficient_label: if physical { "src" } else { "coef" },
    })
}
