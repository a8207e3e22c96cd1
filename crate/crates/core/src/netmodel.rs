//! Network topology, OD ordering, routing matrices and synthetic traffic.
//!
//! OD pairs are ordered source-major: `1-1, 1-2, ..., 1-n, 2-1, ...`. The
//! public `od_index`/`od_pair` helpers are 1-based; everything that indexes
//! matrices directly is 0-based.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};

use crate::error::{Error, Result};
use crate::numerics::svd;

/// 1-based OD index of the pair `(src, dst)` (both 1-based).
pub fn od_index(src: usize, dst: usize, n: usize) -> Result<usize> {
    if src == 0 || dst == 0 || src > n || dst > n {
        return Err(Error::arg(format!("od pair ({src},{dst}) out of range for n={n}")));
    }
    Ok((src - 1) * n + dst)
}

/// Inverse of [`od_index`].
pub fn od_pair(k: usize, n: usize) -> Result<(usize, usize)> {
    if k == 0 || k > n * n {
        return Err(Error::arg(format!("od index {k} out of range for n={n}")));
    }
    Ok(((k - 1) / n + 1, (k - 1) % n + 1))
}

/// 0-based column of the OD pair `(src, dst)` given 0-based nodes.
#[inline]
pub fn od_col(src: usize, dst: usize, n: usize) -> usize {
    src * n + dst
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_count: usize,
    link_count: usize,
    edges: Option<Vec<(usize, usize)>>,
    labels: Option<Vec<String>>,
}

impl Topology {
    /// Topology with known directed links (0-based endpoints).
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::arg("a topology needs at least two nodes"));
        }
        if edges.is_empty() {
            return Err(Error::arg("a topology needs at least one link"));
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &edges {
            if a >= node_count || b >= node_count {
                return Err(Error::arg(format!("link ({a},{b}) references a missing node")));
            }
            if a == b {
                return Err(Error::arg(format!("self-loop link at node {a}")));
            }
            if !seen.insert((a, b)) {
                return Err(Error::arg(format!("duplicate link ({a},{b})")));
            }
        }
        Ok(Topology {
            node_count,
            link_count: edges.len(),
            edges: Some(edges),
            labels: None,
        })
    }

    /// Topology known only by its size, as recovered from a routing matrix.
    pub fn opaque(node_count: usize, link_count: usize) -> Result<Self> {
        if node_count < 2 || link_count == 0 {
            return Err(Error::arg("a topology needs n >= 2 and m >= 1"));
        }
        Ok(Topology {
            node_count,
            link_count,
            edges: None,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.node_count {
            return Err(Error::arg("label count does not match node count"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn link_count(&self) -> usize {
        self.link_count
    }

    pub fn edges(&self) -> Option<&[(usize, usize)]> {
        self.edges.as_deref()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn od_count(&self) -> usize {
        self.node_count * self.node_count
    }
}

/// Binary link-by-OD incidence matrix (`m x n^2`).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    node_count: usize,
    matrix: DMatrix<f64>,
}

impl RoutingMatrix {
    pub fn new(node_count: usize, matrix: DMatrix<f64>) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::arg("routing matrix needs n >= 2"));
        }
        if matrix.ncols() != node_count * node_count {
            return Err(Error::arg(format!(
                "routing matrix has {} columns, expected n^2 = {}",
                matrix.ncols(),
                node_count * node_count
            )));
        }
        if matrix.nrows() == 0 {
            return Err(Error::arg("routing matrix needs at least one link"));
        }
        if let Some(v) = matrix.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg(format!("routing entry {v} is not 0 or 1")));
        }
        Ok(RoutingMatrix { node_count, matrix })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn link_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// OD flow volumes (kbps), one row per timestamp, OD columns in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub node_count: usize,
    pub values: DMatrix<f64>,
    pub timestep_seconds: f64,
    pub start_index: usize,
}

impl TrafficSeries {
    pub fn new(node_count: usize, values: DMatrix<f64>, timestep_seconds: f64, start_index: usize) -> Result<Self> {
        if values.ncols() != node_count * node_count {
            return Err(Error::arg(format!(
                "traffic series has {} columns, expected {}",
                values.ncols(),
                node_count * node_count
            )));
        }
        if !(timestep_seconds > 0.0) {
            return Err(Error::arg("timestep must be positive"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::arg(format!("traffic value {v} is negative or non-finite")));
        }
        Ok(TrafficSeries {
            node_count,
            values,
            timestep_seconds,
            start_index,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }

    /// Rows `start..start + len` as a new series.
    pub fn slice(&self, start: usize, len: usize) -> TrafficSeries {
        TrafficSeries {
            node_count: self.node_count,
            values: self.values.rows(start, len).into_owned(),
            timestep_seconds: self.timestep_seconds,
            start_index: self.start_index + start,
        }
    }
}

/// Link loads (kbps), one row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSeries {
    pub values: DMatrix<f64>,
    pub timestep_seconds: f64,
    pub start_index: usize,
}

impl LinkSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }
}

/// `Y(t) = A X(t)` for every timestamp.
pub fn link_counts(a: &RoutingMatrix, x: &TrafficSeries) -> Result<LinkSeries> {
    if a.node_count() != x.node_count {
        return Err(Error::arg(format!(
            "routing matrix is for n={}, traffic for n={}",
            a.node_count(),
            x.node_count
        )));
    }
    Ok(LinkSeries {
        values: &x.values * a.matrix().transpose(),
        timestep_seconds: x.timestep_seconds,
        start_index: x.start_index,
    })
}

/// Hop-count shortest-path routing. On every path the predecessor of a node is
/// the lowest-indexed neighbour one hop closer to the source.
pub fn shortest_path_routing(topology: &Topology) -> Result<RoutingMatrix> {
    let edges = topology
        .edges()
        .ok_or_else(|| Error::arg("routing needs a topology with known links"))?;
    let n = topology.node_count();
    let link_of: HashMap<(usize, usize), usize> = edges.iter().enumerate().map(|(l, &e)| (e, l)).collect();
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in edges {
        incoming[b].push(a);
        outgoing[a].push(b);
    }
    for list in incoming.iter_mut().chain(outgoing.iter_mut()) {
        list.sort_unstable();
    }

    let mut a = DMatrix::zeros(edges.len(), n * n);
    for src in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &outgoing[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for dst in 0..n {
            if dst == src {
                continue;
            }
            if dist[dst] == usize::MAX {
                return Err(Error::Generation(format!("node {} cannot reach node {}", src + 1, dst + 1)));
            }
            let col = od_col(src, dst, n);
            let mut v = dst;
            while v != src {
                let u = *incoming[v]
                    .iter()
                    .find(|&&u| dist[u] != usize::MAX && dist[u] + 1 == dist[v])
                    .expect("bfs predecessor exists");
                a[(link_of[&(u, v)], col)] = 1.0;
                v = u;
            }
        }
    }
    RoutingMatrix::new(n, a)
}

/// The three-node, four-link line network `1 <-> 2 <-> 3` used as a worked example.
pub fn toy_network() -> (Topology, RoutingMatrix) {
    let topo = Topology::new(3, vec![(0, 1), (1, 0), (1, 2), (2, 1)]).expect("valid toy topology");
    let a = shortest_path_routing(&topo).expect("toy network is connected");
    (topo, a)
}

/// Random strongly connected digraph with `round(n * avg_out_degree)` links
/// (a random Hamiltonian cycle plus random extra links), routed by
/// [`shortest_path_routing`]. Links are listed in lexicographic order.
pub fn gen_topology(seed: u64, n: usize, avg_out_degree: f64) -> Result<(Topology, RoutingMatrix)> {
    if n < 2 {
        return Err(Error::arg("need at least two nodes"));
    }
    if !(avg_out_degree >= 1.0) {
        return Err(Error::arg("average out-degree must be at least 1"));
    }
    let m = (n as f64 * avg_out_degree).round() as usize;
    if m > n * (n - 1) {
        return Err(Error::Generation(format!(
            "{m} links requested but a {n}-node digraph has at most {}",
            n * (n - 1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (order[i], order[(i + 1) % n])).collect();
    edges.sort_unstable();
    edges.dedup();
    let mut extra: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && edges.binary_search(&(a, b)).is_err())
        .collect();
    extra.shuffle(&mut rng);
    let need = m.saturating_sub(edges.len());
    edges.extend(extra.into_iter().take(need));
    edges.sort_unstable();
    let topo = Topology::new(n, edges)?;
    let a = shortest_path_routing(&topo)?;
    Ok((topo, a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GravityParams {
    pub mean_scale: f64,
    /// Period (in timesteps) of the diurnal factor; `None` keeps it at 1.
    pub temporal_period: Option<f64>,
    pub diurnal_amplitude: f64,
    /// Fraction of a full cycle over which destination phases are spread.
    pub phase_spread: f64,
    pub noise_cv: f64,
    pub timestep_seconds: f64,
}

impl Default for GravityParams {
    fn default() -> Self {
        GravityParams {
            mean_scale: 1000.0,
            temporal_period: Some(288.0),
            diurnal_amplitude: 0.5,
            phase_spread: 0.0,
            noise_cv: 0.0,
            timestep_seconds: 300.0,
        }
    }
}

/// Gravity-model traffic: `X_(j,d)(t) = o_j a_d / sum_{d' != j} a_d' * scale * s_d(t) * eps`,
/// with lognormal `eps` of mean 1 and coefficient of variation `noise_cv`.
/// Self flows are zero, so each source's total is `o_j * scale * s(t)` when
/// the phases coincide and the noise is off.
pub fn gen_gravity_traffic(seed: u64, topology: &Topology, samples: usize, params: &GravityParams) -> Result<TrafficSeries> {
    if samples == 0 {
        return Err(Error::arg("need at least one sample"));
    }
    if !(params.mean_scale > 0.0) || params.noise_cv < 0.0 || !(0.0..1.0).contains(&params.diurnal_amplitude) {
        return Err(Error::arg("invalid gravity parameters"));
    }
    if let Some(p) = params.temporal_period {
        if !(p > 0.0) {
            return Err(Error::arg("temporal period must be positive"));
        }
    }
    let n = topology.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = Exp::new(1.0).expect("valid rate");
    let origin: Vec<f64> = (0..n).map(|_| 0.1 + weight.sample(&mut rng)).collect();
    let attract: Vec<f64> = (0..n).map(|_| 0.1 + weight.sample(&mut rng)).collect();
    let phase: Vec<f64> = (0..n)
        .map(|_| params.phase_spread * rng.gen::<f64>() * 2.0 * PI)
        .collect();
    let noise = if params.noise_cv > 0.0 {
        let sigma2 = (1.0 + params.noise_cv * params.noise_cv).ln();
        Some(LogNormal::new(-sigma2 / 2.0, sigma2.sqrt()).expect("valid lognormal"))
    } else {
        None
    };

    let mut values = DMatrix::zeros(samples, n * n);
    for t in 0..samples {
        for j in 0..n {
            let denom: f64 = (0..n).filter(|&d| d != j).map(|d| attract[d]).sum();
            for d in 0..n {
                if d == j {
                    continue;
                }
                let diurnal = match params.temporal_period {
                    Some(p) => 1.0 + params.diurnal_amplitude * (2.0 * PI * t as f64 / p + phase[d]).sin(),
                    None => 1.0,
                };
                let eps = noise.as_ref().map_or(1.0, |dist| dist.sample(&mut rng));
                values[(t, od_col(j, d, n))] = origin[j] * attract[d] / denom * params.mean_scale * diurnal * eps;
            }
        }
    }
    TrafficSeries::new(n, values, params.timestep_seconds, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactModelParams {
    pub mean_scale: f64,
    /// Relative strength of the link-load-driven change in demand fractions, in `[0, 1)`.
    pub coupling: f64,
    /// Period (timesteps) of the source-demand oscillation.
    pub period: f64,
    /// Relative amplitude of the source-demand oscillation, in `[0, 1)`.
    pub amplitude: f64,
    pub timestep_seconds: f64,
}

impl Default for ExactModelParams {
    fn default() -> Self {
        ExactModelParams {
            mean_scale: 1000.0,
            coupling: 0.3,
            period: 400.0,
            amplitude: 0.3,
            timestep_seconds: 300.0,
        }
    }
}

/// Traffic that follows the demand-fraction model exactly:
/// `X(t) = Psi(t) X_c(t)` with `Psi(t) = psi_base + u(t) * psi_direction` and
/// `u(t) = (w . Y(t) - offset) / scale` an affine function of the link loads.
#[derive(Debug, Clone)]
pub struct ExactModel {
    pub series: TrafficSeries,
    /// `n^2 x n` base demand fractions (self rows zero).
    pub psi_base: DMatrix<f64>,
    /// `n^2 x n` direction with zero per-source sums.
    pub psi_direction: DMatrix<f64>,
    pub link_weight: DVector<f64>,
    pub offset: f64,
    pub scale: f64,
    /// `T x n` source demands.
    pub source_demands: DMatrix<f64>,
    /// `u(t)` per row.
    pub drive: Vec<f64>,
}

impl ExactModel {
    /// The true demand fractions at row `t`.
    pub fn psi_at(&self, t: usize) -> DMatrix<f64> {
        &self.psi_base + &self.psi_direction * self.drive[t]
    }
}

/// Builds an [`ExactModel`] over the given routing.
///
/// The link weight `w` is drawn orthogonal to the range of `A psi_direction`,
/// so `w . Y(t)` does not depend on `u(t)` and the implicit relation between
/// `Psi(t)` and `Y(t)` resolves in closed form. With `coupling = 0` the demand
/// fractions are constant.
pub fn gen_exact_model(seed: u64, routing: &RoutingMatrix, samples: usize, params: &ExactModelParams) -> Result<ExactModel> {
    if samples == 0 {
        return Err(Error::arg("need at least one sample"));
    }
    if !(0.0..1.0).contains(&params.coupling) || !(0.0..1.0).contains(&params.amplitude) {
        return Err(Error::arg("coupling and amplitude must lie in [0, 1)"));
    }
    if !(params.period > 0.0) || !(params.mean_scale > 0.0) {
        return Err(Error::arg("period and mean scale must be positive"));
    }
    let n = routing.node_count();
    let m = routing.link_count();
    let a = routing.matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut psi_base = DMatrix::zeros(n * n, n);
    let mut psi_direction = DMatrix::zeros(n * n, n);
    for j in 0..n {
        let raw: Vec<f64> = (0..n).map(|d| if d == j { 0.0 } else { rng.gen_range(0.5..1.5) }).collect();
        let total: f64 = raw.iter().sum();
        let base: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut dir: Vec<f64> = (0..n).map(|d| if d == j { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
        let mean = dir.iter().sum::<f64>() / (n - 1) as f64;
        for (d, v) in dir.iter_mut().enumerate() {
            if d != j {
                *v -= mean;
            }
        }
        let peak = dir.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let floor = base
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != j)
            .fold(f64::INFINITY, |acc, (_, &v)| acc.min(v));
        let gain = if peak > 0.0 { params.coupling * floor / peak } else { 0.0 };
        for d in 0..n {
            if d != j {
                psi_base[(od_col(j, d, n), j)] = base[d];
                psi_direction[(od_col(j, d, n), j)] = gain * dir[d];
            }
        }
    }

    let origin: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let source_demands = DMatrix::from_fn(samples, n, |t, j| {
        params.mean_scale * origin[j] * (1.0 + params.amplitude * (2.0 * PI * t as f64 / params.period + phase[j]).sin())
    });

    let mut link_weight = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
    if params.coupling > 0.0 {
        let ad = a * &psi_direction;
        let dec = svd(&ad)?;
        let rank = dec.rank(1e-10);
        for c in 0..rank {
            let u = dec.u.column(c);
            let proj = u.dot(&link_weight);
            link_weight -= u * proj;
        }
        if link_weight.norm() < 1e-8 {
            return Err(Error::Generation(
                "routing leaves no link direction independent of the demand coupling".into(),
            ));
        }
    }
    let lift = a * &psi_base;
    let raw: Vec<f64> = (0..samples)
        .map(|t| link_weight.dot(&(&lift * source_demands.row(t).transpose())))
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let offset = 0.5 * (lo + hi);
    let scale = if hi - lo > 1e-12 * (1.0 + hi.abs()) { 0.5 * (hi - lo) } else { 1.0 };
    let drive: Vec<f64> = raw.iter().map(|r| (r - offset) / scale).collect();

    let mut values = DMatrix::zeros(samples, n * n);
    for t in 0..samples {
        let psi = &psi_base + &psi_direction * drive[t];
        let x = psi * source_demands.row(t).transpose();
        values.row_mut(t).copy_from(&x.transpose());
    }
    let series = TrafficSeries::new(n, values, params.timestep_seconds, 0)?;
    Ok(ExactModel {
        series,
        psi_base,
        psi_direction,
        link_weight,
        offset,
        scale,
        source_demands,
        drive,
    })
}
