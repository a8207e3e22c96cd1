//! The online estimation loop: assemble link loads from monitored links and
//! carried-forward estimates, predict `Psi`, reselect links, solve for the
//! source demands and recover the OD flows.

use std::path::Path;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};

use crate::demand::{build_phi, build_psi, predict_psi, train_regressor, DemandRegressor, DemandTransform, PredictOptions, RegressorOptions};
use crate::error::{Error, Result};
use crate::ingest::{format_value, write_time_table, DatasetBundle};
use crate::netmodel::{LinkSeries, RoutingMatrix};
use crate::numerics::{solve_cwls, solve_symmetric, ConstraintMode, CwlsProblem, SignConstraint, SolveStatus};
use crate::subset::{select_links, slice_system, LinkSelection};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Number of monitored links `s`.
    pub monitored: usize,
    pub constraint_mode: ConstraintMode,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub renormalize: bool,
    /// Recompute the link ranking every this many steps.
    pub reselect_every: usize,
    /// Newly selected links are only read at the next step; until then their
    /// carried-forward estimate stands in.
    pub lagged_measurements: bool,
    /// Relative ridge added to the link covariance before inversion.
    pub covariance_ridge: f64,
    pub regressor: RegressorOptions,
}

impl EstimatorConfig {
    pub fn new(monitored: usize) -> Self {
        EstimatorConfig {
            monitored,
            constraint_mode: ConstraintMode::LowerBound,
            tolerance: crate::numerics::DEFAULT_TOLERANCE,
            max_iterations: crate::numerics::DEFAULT_MAX_ITERATIONS,
            renormalize: false,
            reselect_every: 1,
            lagged_measurements: false,
            covariance_ridge: 1e-6,
            regressor: RegressorOptions::default(),
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.monitored == 0 || self.monitored > m {
            return Err(Error::Config(format!("monitored links s={} outside 1..={m}", self.monitored)));
        }
        if self.reselect_every == 0 {
            return Err(Error::Config("reselect_every must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config("solver tolerance and iteration cap must be positive".into()));
        }
        if !(self.covariance_ridge >= 0.0) {
            return Err(Error::Config("covariance ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Where the demand fractions come from at each step.
#[derive(Debug, Clone, PartialEq)]
pub enum PsiSource {
    Regressor(DemandRegressor),
    /// A known, constant `Psi`.
    Fixed(DemandTransform),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub psi_source: PsiSource,
    pub routing: RoutingMatrix,
    pub link_cov: DMatrix<f64>,
    pub config: EstimatorConfig,
    /// Last assembled estimate of every link load.
    pub y_carry: DVector<f64>,
    selection: Option<LinkSelection>,
    steps: usize,
}

/// Sample covariance (divisor `T - 1`) of the link loads; zero for `T < 2`.
pub fn link_covariance(y: &LinkSeries) -> DMatrix<f64> {
    let (t, m) = y.values.shape();
    if t < 2 {
        return DMatrix::zeros(m, m);
    }
    let mean = y.values.row_mean();
    let mut centred = y.values.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.tr_mul(&centred) / (t - 1) as f64;
    (&cov + cov.transpose()) * 0.5
}

/// Trains the regressor on the training window and computes the link covariance.
pub fn init_state(train: &DatasetBundle, config: EstimatorConfig) -> Result<EstimatorState> {
    if train.is_empty() {
        return Err(Error::Training("empty training window".into()));
    }
    let n = train.node_count();
    let y = train.link_series();
    let psis = (0..train.len())
        .map(|t| build_psi(&train.traffic.row(t), n, config.regressor.policy))
        .collect::<Result<Vec<_>>>()?;
    let regressor = train_regressor(&y, &psis, &config.regressor)?;
    let link_cov = link_covariance(&y);
    EstimatorState::new(PsiSource::Regressor(regressor), train.routing.clone(), link_cov, config)
}

impl EstimatorState {
    pub fn new(psi_source: PsiSource, routing: RoutingMatrix, link_cov: DMatrix<f64>, config: EstimatorConfig) -> Result<Self> {
        let m = routing.link_count();
        config.validate(m)?;
        if link_cov.shape() != (m, m) {
            return Err(Error::arg(format!("link covariance must be {m}x{m}")));
        }
        let n = routing.node_count();
        match &psi_source {
            PsiSource::Regressor(r) if r.node_count() != n || r.link_count() != m => {
                return Err(Error::arg("regressor does not match the routing"));
            }
            PsiSource::Fixed(p) if p.node_count() != n => return Err(Error::arg("demand transform does not match the routing")),
            _ => {}
        }
        Ok(EstimatorState {
            psi_source,
            routing,
            link_cov,
            config,
            y_carry: DVector::zeros(m),
            selection: None,
            steps: 0,
        })
    }

    /// The selection used at the last step, if any.
    pub fn selection(&self) -> Option<&LinkSelection> {
        self.selection.as_ref()
    }

    fn predict(&self, y_hat: &DVector<f64>) -> Result<DemandTransform> {
        match &self.psi_source {
            PsiSource::Regressor(r) => predict_psi(
                r,
                y_hat,
                PredictOptions {
                    renormalize: self.config.renormalize,
                    policy: self.config.regressor.policy,
                },
            ),
            PsiSource::Fixed(p) => Ok(p.clone()),
        }
    }
}

/// Ridge-regularised least-squares start point, negatives clamped to zero.
pub fn prior_xc(phi_s: &DMatrix<f64>, y_s: &DVector<f64>) -> Result<DVector<f64>> {
    if phi_s.nrows() != y_s.len() {
        return Err(Error::arg("prior: dimension mismatch"));
    }
    let n = phi_s.ncols();
    let gram = phi_s.tr_mul(phi_s);
    let trace = gram.trace();
    if !(trace > 0.0) {
        return Ok(DVector::zeros(n));
    }
    let rhs = phi_s.tr_mul(y_s);
    let lambda = 1e-8 * trace / n as f64;
    let reg = &gram + DMatrix::identity(n, n) * lambda;
    let x = match Cholesky::new(reg) {
        Some(ch) => ch.solve(&rhs),
        None => solve_symmetric(&gram, &DMatrix::from_column_slice(n, 1, rhs.as_slice()), lambda).column(0).into_owned(),
    };
    Ok(x.map(|v| v.max(0.0)))
}

/// `inverse(cov + ridge * trace / k * I)`, or the identity for a zero covariance.
pub fn weight_matrix(cov: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let k = cov.nrows();
    let trace = cov.trace();
    if !(trace > 0.0) {
        return DMatrix::identity(k, k);
    }
    let reg = cov + DMatrix::identity(k, k) * (ridge * trace / k as f64);
    match Cholesky::new(reg.clone()) {
        Some(ch) => {
            let inv = ch.inverse();
            (&inv + inv.transpose()) * 0.5
        }
        None => solve_symmetric(&reg, &DMatrix::identity(k, k), 0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Absolute 0-based sample index.
    pub t: usize,
    pub x_hat: DVector<f64>,
    pub xc_hat: DVector<f64>,
    pub y_hat: DVector<f64>,
    /// `None` for bases that are not demand fractions.
    pub psi_hat: Option<DemandTransform>,
    pub selection: LinkSelection,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    /// The side constraints were infeasible and the step was re-solved without them.
    pub fell_back: bool,
}

impl StepResult {
    /// Whether the side constraints held at the returned solution.
    pub fn feasible(&self) -> bool {
        !self.fell_back
    }

    /// Steps that hit the iteration cap or needed the fallback.
    pub fn flagged(&self) -> bool {
        self.fell_back || self.status != SolveStatus::Optimal
    }
}

/// One estimation step at absolute sample `t`. `truth_y` holds the true link
/// loads; only the links the estimator chooses to monitor are read from it.
pub fn step(state: &mut EstimatorState, t: usize, truth_y: &DVector<f64>) -> Result<StepResult> {
    let m = state.routing.link_count();
    if truth_y.len() != m {
        return Err(Error::arg(format!("{} link values, expected {m}", truth_y.len())));
    }
    let previous = state.selection.clone();
    let assembled = match &previous {
        None => truth_y.clone(),
        Some(sel) => sel.scatter(&sel.gather(truth_y)?, &state.y_carry)?,
    };

    let psi_hat = state.predict(&assembled)?;
    let phi_hat = build_phi(&state.routing, &psi_hat)?;
    let selection = match &previous {
        Some(sel) if state.steps % state.config.reselect_every != 0 => sel.clone(),
        _ => select_links(&phi_hat, state.config.monitored)?,
    };

    let measured = if state.config.lagged_measurements {
        let was_read = previous.as_ref().map(LinkSelection::mask).unwrap_or_else(|| vec![true; m]);
        DVector::from_fn(m, |l, _| if was_read[l] { truth_y[l] } else { assembled[l] })
    } else {
        truth_y.clone()
    };
    let (y_s, phi_s) = slice_system(&selection, &measured, &phi_hat)?;
    let mon = selection.monitored();
    let cov_s = DMatrix::from_fn(mon.len(), mon.len(), |i, j| state.link_cov[(mon[i], mon[j])]);
    let weight = weight_matrix(&cov_s, state.config.covariance_ridge);
    let start = prior_xc(&phi_s, &y_s)?;

    let mut problem = CwlsProblem::new(phi_s, y_s.clone(), weight)
        .with_mode(state.config.constraint_mode)
        .with_sign(SignConstraint::NonNegative)
        .with_start(start);
    problem.tolerance = state.config.tolerance;
    problem.max_iterations = state.config.max_iterations;
    let mut solution = solve_cwls(&problem)?;
    let mut fell_back = false;
    if let SolveStatus::Infeasible { max_violation } = solution.status {
        debug!("step {t}: constraints infeasible (violation {max_violation:e}), re-solving without them");
        problem.constraint_mode = ConstraintMode::None;
        solution = solve_cwls(&problem)?;
        fell_back = true;
    }
    if solution.status == SolveStatus::IterationLimit {
        warn!("step {t}: solver hit the iteration cap");
    }

    let xc_hat = solution.x.map(|v| v.max(0.0));
    let x_hat = psi_hat.apply(&xc_hat);
    let y_hat = phi_hat.matrix() * &xc_hat;
    let mut carry = y_hat.clone();
    for (k, &l) in mon.iter().enumerate() {
        carry[l] = y_s[k];
    }
    state.y_carry = carry;
    state.selection = Some(selection.clone());
    state.steps += 1;

    Ok(StepResult {
        t,
        x_hat,
        xc_hat,
        y_hat,
        psi_hat: Some(psi_hat),
        selection,
        iterations: solution.iterations,
        kkt_residual: solution.kkt_residual,
        status: solution.status,
        fell_back,
    })
}

/// Outcome of a run: the per-step trace plus the number of flagged steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub steps: Vec<StepResult>,
    pub node_count: usize,
    /// Column prefix for the solved coefficients: `src` when they are source demands.
    pub coefficient_label: &'static str,
}

impl RunTrace {
    pub fn flagged_count(&self) -> usize {
        self.steps.iter().filter(|s| s.flagged()).count()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.flagged_count() as f64 / self.steps.len() as f64
        }
    }

    /// `T x n^2` matrix of the OD estimates.
    pub fn estimates(&self) -> DMatrix<f64> {
        let n2 = self.node_count * self.node_count;
        DMatrix::from_fn(self.steps.len(), n2, |t, i| self.steps[t].x_hat[i])
    }

    /// `T x k` matrix of the solved coefficients.
    pub fn demands(&self) -> DMatrix<f64> {
        let k = self.steps.first().map(|s| s.xc_hat.len()).unwrap_or(self.node_count);
        DMatrix::from_fn(self.steps.len(), k, |t, j| self.steps[t].xc_hat[j])
    }

    fn start_index(&self) -> usize {
        self.steps.first().map(|s| s.t).unwrap_or(0)
    }

    /// Writes `estimates.csv`, `demands.csv`, `diagnostics.csv` and `selection.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_time_table(&dir.join("estimates.csv"), "od", self.start_index(), &self.estimates())?;
        write_time_table(&dir.join("demands.csv"), self.coefficient_label, self.start_index(), &self.demands())?;
        let mut diag = String::from("t,iterations,kkt,feasible,s\n");
        let mut sel = String::from("t");
        let s_max = self.steps.iter().map(|s| s.selection.monitored_count()).max().unwrap_or(0);
        for i in 1..=s_max {
            sel.push_str(&format!(",link_{i}"));
        }
        sel.push('\n');
        for s in &self.steps {
            diag.push_str(&format!(
                "{},{},{},{},{}\n",
                s.t + 1,
                s.iterations,
                format_value(s.kkt_residual),
                u8::from(s.feasible() && s.status == SolveStatus::Optimal),
                s.selection.monitored_count()
            ));
            let ids: Vec<String> = s.selection.monitored().iter().map(|l| (l + 1).to_string()).collect();
            sel.push_str(&format!("{},{}\n", s.t + 1, ids.join(",")));
        }
        let p = dir.join("diagnostics.csv");
        std::fs::write(&p, diag).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("selection.csv");
        std::fs::write(&p, sel).map_err(|e| Error::io(&p, e))
    }
}

/// Runs `horizon` steps over the test window. The first step reads every link.
pub fn run(state: &mut EstimatorState, test: &DatasetBundle, horizon: usize) -> Result<RunTrace> {
    if horizon > test.len() {
        return Err(Error::arg(format!("horizon {horizon} exceeds the {} test samples", test.len())));
    }
    if test.routing != state.routing {
        return Err(Error::arg("test data uses a different routing"));
    }
    let y = test.link_series();
    let steps = (0..horizon)
        .map(|t| step(state, test.traffic.start_index + t, &y.row(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunTrace {
        steps,
        node_count: test.node_count(),
        coefficient_label: "src",
    })
}
