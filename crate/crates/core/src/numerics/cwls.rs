use nalgebra::{Cholesky, DMatrix, DVector};

use super::{ensure_finite, lstsq_min_norm, qr_full};
use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

/// Side constraint tying the fitted link loads to the measured ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintMode {
    /// Only the sign constraint on the unknowns.
    None,
    /// `design * x >= target` componentwise.
    #[default]
    LowerBound,
    /// `|design * x - target| <= tol * (1 + |target|)` componentwise.
    Equality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignConstraint {
    #[default]
    NonNegative,
    Free,
}

/// Minimise `(target - design x)^T weight (target - design x)`.
#[derive(Debug, Clone)]
pub struct CwlsProblem {
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    pub weight: DMatrix<f64>,
    pub constraint_mode: ConstraintMode,
    pub sign: SignConstraint,
    pub start: Option<DVector<f64>>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl CwlsProblem {
    pub fn new(design: DMatrix<f64>, target: DVector<f64>, weight: DMatrix<f64>) -> Self {
        CwlsProblem {
            design,
            target,
            weight,
            constraint_mode: ConstraintMode::default(),
            sign: SignConstraint::default(),
            start: None,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn with_mode(mut self, mode: ConstraintMode) -> Self {
        self.constraint_mode = mode;
        self
    }

    pub fn with_sign(mut self, sign: SignConstraint) -> Self {
        self.sign = sign;
        self
    }

    pub fn with_start(mut self, start: DVector<f64>) -> Self {
        self.start = Some(start);
        self
    }

    /// Weighted objective at `x`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let r = &self.target - &self.design * x;
        (r.transpose() * &self.weight * &r)[(0, 0)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveStatus {
    Optimal,
    /// The side constraints cannot be met; `max_violation` is in target units.
    Infeasible { max_violation: f64 },
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct CwlsSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Objective after every optimality-phase iteration.
    pub objective_trace: Vec<f64>,
}

impl CwlsSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Primal active-set solver for the weighted least-squares problem with a
/// sign constraint and the optional side constraints of [`ConstraintMode`].
///
/// The weight is factored as `L L^T`, turning the objective into
/// `||L^T (target - design x)||^2`. A feasibility phase (minimising the sum of
/// squared slacks) precedes the optimality phase whenever side constraints are
/// present. Steps are minimum-norm least-squares moves on the current face, so
/// rank-deficient designs are handled without extra regularisation.
pub fn solve_cwls(p: &CwlsProblem) -> Result<CwlsSolution> {
    let (k, n) = p.design.shape();
    if k == 0 || n == 0 {
        return Err(Error::arg("cwls design must be non-empty"));
    }
    if p.target.len() != k || p.weight.shape() != (k, k) {
        return Err(Error::arg(format!(
            "cwls dimension mismatch: design {k}x{n}, target {}, weight {}x{}",
            p.target.len(),
            p.weight.nrows(),
            p.weight.ncols()
        )));
    }
    ensure_finite(&p.design, "design")?;
    ensure_finite(&DMatrix::from_column_slice(k, 1, p.target.as_slice()), "target")?;
    ensure_finite(&p.weight, "weight")?;
    if let Some(s) = &p.start {
        if s.len() != n {
            return Err(Error::arg("start vector has wrong length"));
        }
    }
    if !(p.tolerance > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    let wmax = p.weight.abs().max();
    if (&p.weight - p.weight.transpose()).abs().max() > 1e-10 * wmax.max(1.0) {
        return Err(Error::arg("weight matrix is not symmetric"));
    }
    let chol = Cholesky::new(p.weight.clone())
        .ok_or_else(|| Error::arg("weight matrix is not positive definite"))?;
    let lt = chol.l().transpose();
    let g = &lt * &p.design;
    let b = &lt * &p.target;

    let nonneg = p.sign == SignConstraint::NonNegative;
    let mut x0 = p.start.clone().unwrap_or_else(|| DVector::zeros(n));
    if nonneg {
        x0.apply(|v| *v = v.max(0.0));
    }

    // Side constraints as rows c^T x >= d, in original units.
    let mut side_c: Vec<DVector<f64>> = Vec::new();
    let mut side_d: Vec<f64> = Vec::new();
    match p.constraint_mode {
        ConstraintMode::None => {}
        ConstraintMode::LowerBound => {
            for i in 0..k {
                side_c.push(p.design.row(i).transpose());
                side_d.push(p.target[i]);
            }
        }
        ConstraintMode::Equality => {
            for i in 0..k {
                let tau = p.tolerance * (1.0 + p.target[i].abs());
                let row = p.design.row(i).transpose();
                side_c.push(row.clone());
                side_d.push(p.target[i] - tau);
                side_c.push(-row);
                side_d.push(-p.target[i] - tau);
            }
        }
    }
    let side_violation = |x: &DVector<f64>| -> f64 {
        side_c
            .iter()
            .zip(&side_d)
            .map(|(c, &d)| (d - c.dot(x)).max(0.0))
            .fold(0.0, f64::max)
    };

    // Zero rows are either vacuous or unsatisfiable.
    let mut keep_c = Vec::new();
    let mut keep_d = Vec::new();
    for (c, &d) in side_c.iter().zip(&side_d) {
        if c.norm() == 0.0 {
            if d > 0.0 {
                let objective = p.objective(&x0);
                return Ok(CwlsSolution {
                    x: x0.clone(),
                    objective,
                    kkt_residual: f64::INFINITY,
                    iterations: 0,
                    status: SolveStatus::Infeasible {
                        max_violation: side_violation(&x0),
                    },
                    objective_trace: Vec::new(),
                });
            }
        } else {
            keep_c.push(c.clone());
            keep_d.push(d);
        }
    }

    let mut iterations = 0;
    let mut x = x0;

    if !keep_c.is_empty() {
        let q = keep_c.len();
        let nz = n + q;
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        if nonneg {
            for j in 0..n {
                rows.push((unit(nz, j), 0.0));
            }
        }
        for i in 0..q {
            rows.push((unit(nz, n + i), 0.0));
        }
        for (i, (c, &d)) in keep_c.iter().zip(&keep_d).enumerate() {
            let mut row = DVector::zeros(nz);
            row.rows_mut(0, n).copy_from(c);
            row[n + i] = 1.0;
            rows.push((row, d));
        }
        let (c1, d1) = stack_normalized(&rows, nz);
        let mut g1 = DMatrix::zeros(q, nz);
        for i in 0..q {
            g1[(i, n + i)] = 1.0;
        }
        let b1 = DVector::zeros(q);
        let mut z0 = DVector::zeros(nz);
        z0.rows_mut(0, n).copy_from(&x);
        for (i, (c, &d)) in keep_c.iter().zip(&keep_d).enumerate() {
            z0[n + i] = (d - c.dot(&x)).max(0.0);
        }
        // Slacks must be driven to zero relative to the constraint data, not the
        // (zero) phase-one target.
        let dual_tol = 1e-13 * g1.norm() * (1.0 + d1.amax());
        let out = active_set(&g1, &b1, &c1, &d1, z0, dual_tol, p.max_iterations, None);
        iterations += out.iterations;
        x = out.x.rows(0, n).into_owned();
        if nonneg {
            x.apply(|v| *v = v.max(0.0));
        }

        let xscale = 1.0 + x.amax();
        let worst = keep_c
            .iter()
            .zip(&keep_d)
            .map(|(c, &d)| (d - c.dot(&x)).max(0.0) / c.norm() / (1.0 + d.abs() / c.norm() + xscale))
            .fold(0.0, f64::max);
        if worst > 1e-10 {
            let objective = p.objective(&x);
            return Ok(CwlsSolution {
                objective,
                kkt_residual: f64::INFINITY,
                iterations,
                status: SolveStatus::Infeasible {
                    max_violation: side_violation(&x),
                },
                x,
                objective_trace: Vec::new(),
            });
        }
    }

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    if nonneg {
        for j in 0..n {
            rows.push((unit(n, j), 0.0));
        }
    }
    for (c, &d) in keep_c.iter().zip(&keep_d) {
        rows.push((c.clone(), d));
    }
    let (c2, d2) = stack_normalized(&rows, n);
    let mut trace = vec![(&b - &g * &x).norm_squared()];
    let budget = p.max_iterations.saturating_sub(iterations);
    let dual_tol = p.tolerance * g.norm() * (1.0 + b.norm());
    let out = active_set(&g, &b, &c2, &d2, x, dual_tol, budget, Some(&mut trace));
    iterations += out.iterations;
    let mut x = out.x;
    // Bound rows can be left a few ulps on the wrong side.
    if nonneg {
        x.apply(|v| *v = v.max(0.0));
    }
    let kkt_residual = out.kkt;
    let status = if out.converged {
        SolveStatus::Optimal
    } else {
        SolveStatus::IterationLimit
    };
    Ok(CwlsSolution {
        objective: (&b - &g * &x).norm_squared(),
        x,
        kkt_residual,
        iterations,
        status,
        objective_trace: trace,
    })
}

fn unit(n: usize, j: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[j] = 1.0;
    v
}

fn stack_normalized(rows: &[(DVector<f64>, f64)], n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut c = DMatrix::zeros(rows.len(), n);
    let mut d = DVector::zeros(rows.len());
    for (i, (row, rhs)) in rows.iter().enumerate() {
        let nrm = row.norm();
        c.row_mut(i).copy_from(&(row / nrm).transpose());
        d[i] = rhs / nrm;
    }
    (c, d)
}

struct Outcome {
    x: DVector<f64>,
    iterations: usize,
    converged: bool,
    kkt: f64,
}

/// Minimises `||g x - b||^2` subject to `c x >= d` (unit-norm rows) from a
/// feasible `x0`. Stops when every working multiplier is above `-dual_tol`.
#[allow(clippy::too_many_arguments)]
fn active_set(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    x0: DVector<f64>,
    dual_tol: f64,
    max_iter: usize,
    mut trace: Option<&mut Vec<f64>>,
) -> Outcome {
    let n = g.ncols();
    let p_rows = c.nrows();
    let gnorm = g.norm().max(f64::MIN_POSITIVE);
    let bnorm = b.norm();
    let mut x = x0;

    let slack = |x: &DVector<f64>, i: usize| c.row(i).dot(&x.transpose()) - d[i];
    let act_tol = |x: &DVector<f64>, i: usize| 1e-12 * (1.0 + d[i].abs() + x.amax());

    let mut working: Vec<usize> = Vec::new();
    for i in 0..p_rows {
        if working.len() == n {
            break;
        }
        if slack(&x, i).abs() <= act_tol(&x, i) && independent(c, &working, i) {
            working.push(i);
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    loop {
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let r = b - g * &x;
        let step = match null_basis(c, &working, n) {
            Some(z) => {
                let gz = g * &z;
                z * lstsq_min_norm(&gz, &r)
            }
            None => DVector::zeros(n),
        };
        let gp = g * &step;
        let stalled = step.amax() == 0.0 || gp.norm() <= 1e-13 * (1.0 + bnorm + (g * &x).norm());

        if stalled {
            let lambda = multipliers(g, b, c, &working, &x);
            let mut drop: Option<(usize, f64)> = None;
            for (pos, &ci) in working.iter().enumerate() {
                let l = lambda[pos];
                if l < -dual_tol {
                    match drop {
                        Some((best_pos, best_l)) if l > best_l || (l == best_l && ci > working[best_pos]) => {}
                        _ => drop = Some((pos, l)),
                    }
                }
            }
            match drop {
                Some((pos, _)) => {
                    working.remove(pos);
                }
                None => {
                    converged = true;
                    break;
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut block = None;
            let pnorm = step.norm();
            for i in 0..p_rows {
                if working.contains(&i) {
                    continue;
                }
                let cp = c.row(i).dot(&step.transpose());
                if cp < -1e-14 * pnorm {
                    let a = slack(&x, i).max(0.0) / -cp;
                    if a < alpha {
                        alpha = a;
                        block = Some(i);
                    }
                }
            }
            x += alpha * &step;
            if let Some(i) = block {
                working.push(i);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push((b - g * &x).norm_squared());
            }
        }
    }

    let lambda = multipliers(g, b, c, &working, &x);
    let grad = g.transpose() * (g * &x - b);
    let mut combo = grad.clone();
    for (pos, &ci) in working.iter().enumerate() {
        combo -= lambda[pos] * c.row(ci).transpose();
    }
    let stationarity = combo.amax() / gnorm;
    let dual = lambda.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max) / gnorm;
    let primal = (0..p_rows).map(|i| (-slack(&x, i)).max(0.0)).fold(0.0, f64::max) * gnorm;
    let kkt = stationarity.max(dual).max(primal);

    Outcome {
        x,
        iterations,
        converged,
        kkt,
    }
}

fn independent(c: &DMatrix<f64>, working: &[usize], cand: usize) -> bool {
    if working.is_empty() {
        return true;
    }
    let basis = DMatrix::from_fn(c.ncols(), working.len(), |i, j| c[(working[j], i)]);
    let row = c.row(cand).transpose();
    let coef = lstsq_min_norm(&basis, &row);
    (row - basis * coef).norm() > 1e-8
}

fn null_basis(c: &DMatrix<f64>, working: &[usize], n: usize) -> Option<DMatrix<f64>> {
    let w = working.len();
    if w >= n {
        return None;
    }
    if w == 0 {
        return Some(DMatrix::identity(n, n));
    }
    let ct = DMatrix::from_fn(n, w, |i, j| c[(working[j], i)]);
    let (q, _) = qr_full(&ct);
    Some(q.columns(w, n - w).into_owned())
}

fn multipliers(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DMatrix<f64>,
    working: &[usize],
    x: &DVector<f64>,
) -> DVector<f64> {
    if working.is_empty() {
        return DVector::zeros(0);
    }
    let n = g.ncols();
    let grad = g.transpose() * (g * x - b);
    let ct = DMatrix::from_fn(n, working.len(), |i, j| c[(working[j], i)]);
    lstsq_min_norm(&ct, &grad)
}
