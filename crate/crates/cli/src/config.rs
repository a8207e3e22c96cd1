//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use tomograph::demand::SelfFlowPolicy;
use tomograph::numerics::{ConstraintMode, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE};

pub const KEYS: &[&str] = &[
    "source",
    "path",
    "topology",
    "generator",
    "nodes",
    "degree",
    "samples",
    "mean_scale",
    "noise_cv",
    "period",
    "amplitude",
    "phase_spread",
    "coupling",
    "timestep_seconds",
    "train_len",
    "test_len",
    "method",
    "s",
    "k",
    "sigma_factor",
    "constraint_mode",
    "tolerance",
    "max_iterations",
    "reselect_every",
    "lagged_measurements",
    "renormalize",
    "self_flows",
    "robust",
    "covariance_ridge",
    "seed",
    "repetitions",
    "out",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Synth,
    Canonical(PathBuf),
    Abilene(PathBuf),
    Geant(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Gravity,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTopology {
    Random,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Csdme,
    Pca,
    Cur,
    Pme,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Csdme => "csdme",
            Method::Pca => "pca",
            Method::Cur => "cur",
            Method::Pme => "pme",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub topology: SynthTopology,
    pub generator: Generator,
    pub nodes: usize,
    pub degree: f64,
    pub samples: usize,
    pub mean_scale: f64,
    pub noise_cv: f64,
    /// Diurnal period for gravity traffic, demand period for the exact model.
    pub period: f64,
    pub amplitude: f64,
    pub phase_spread: f64,
    pub coupling: f64,
    pub timestep_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: Source,
    pub synth: SynthParams,
    pub train_len: Option<usize>,
    pub test_len: Option<usize>,
    pub method: Method,
    pub s: Option<usize>,
    pub k: Option<usize>,
    pub sigma_factor: f64,
    pub constraint_mode: ConstraintMode,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub reselect_every: usize,
    pub lagged_measurements: bool,
    pub renormalize: bool,
    pub self_flows: SelfFlowPolicy,
    pub robust: bool,
    pub covariance_ridge: f64,
    pub seed: Option<u64>,
    pub repetitions: usize,
    pub out: PathBuf,
}

/// Dataset-dependent values filled in once the data is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolved {
    pub train_len: usize,
    pub test_len: usize,
    pub s: usize,
    pub k: usize,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override '{s}' is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{key} = '{v}': {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("{key} = '{v}': expected true or false"),
    }
}

fn mode_name(m: ConstraintMode) -> &'static str {
    match m {
        ConstraintMode::None => "none",
        ConstraintMode::LowerBound => "lower_bound",
        ConstraintMode::Equality => "equality",
    }
}

impl ExperimentConfig {
    /// Builds a config from pairs in order; later pairs replace earlier ones.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            let key = KEYS
                .iter()
                .find(|known| **known == k.as_str())
                .ok_or_else(|| anyhow!("unknown configuration key '{k}'"))?;
            map.insert(key, v.as_str());
        }
        let get = |k: &str| map.get(k).copied().filter(|v| !v.is_empty());

        let path = get("path").map(PathBuf::from);
        let need_path = |name: &str| path.clone().ok_or_else(|| anyhow!("source = {name} needs path"));
        let source = match get("source").unwrap_or("synth") {
            "synth" => Source::Synth,
            "canonical" => Source::Canonical(need_path("canonical")?),
            "abilene" => Source::Abilene(need_path("abilene")?),
            "geant" => Source::Geant(need_path("geant")?),
            other => bail!("source = '{other}': expected synth, canonical, abilene or geant"),
        };
        if source == Source::Synth && path.is_some() {
            bail!("path is not used with source = synth");
        }
        let generator = match get("generator").unwrap_or("gravity") {
            "gravity" => Generator::Gravity,
            "exact" => Generator::Exact,
            other => bail!("generator = '{other}': expected gravity or exact"),
        };
        let f = |k: &str, d: f64| get(k).map_or(Ok(d), |v| parse::<f64>(k, v));
        let u = |k: &str, d: usize| get(k).map_or(Ok(d), |v| parse::<usize>(k, v));
        let synth = SynthParams {
            topology: match get("topology").unwrap_or("random") {
                "random" => SynthTopology::Random,
                "toy" => SynthTopology::Toy,
                other => bail!("topology = '{other}': expected random or toy"),
            },
            generator,
            nodes: u("nodes", 8)?,
            degree: f("degree", 3.0)?,
            samples: u("samples", 600)?,
            mean_scale: f("mean_scale", 1000.0)?,
            noise_cv: f("noise_cv", 0.2)?,
            period: f("period", if generator == Generator::Exact { 400.0 } else { 288.0 })?,
            amplitude: f("amplitude", if generator == Generator::Exact { 0.3 } else { 0.5 })?,
            phase_spread: f("phase_spread", 0.5)?,
            coupling: f("coupling", 0.3)?,
            timestep_seconds: f("timestep_seconds", 300.0)?,
        };
        if synth.nodes < 2 {
            bail!("nodes = {}: need at least 2", synth.nodes);
        }

        let method = match get("method").unwrap_or("csdme") {
            "csdme" => Method::Csdme,
            "pca" => Method::Pca,
            "cur" => Method::Cur,
            "pme" => Method::Pme,
            other => bail!("method = '{other}': expected csdme, pca, cur or pme"),
        };
        let opt_u = |k: &str| get(k).map(|v| parse::<usize>(k, v)).transpose();
        let s = opt_u("s")?;
        let k = opt_u("k")?;
        if s.is_some() && method != Method::Csdme {
            bail!("s applies to method = csdme only (baselines monitor every link)");
        }
        if k.is_some() && !matches!(method, Method::Pca | Method::Cur) {
            bail!("k applies to method = pca or cur only");
        }
        if get("sigma_factor").is_some() && method != Method::Pme {
            bail!("sigma_factor applies to method = pme only");
        }
        let sigma_factor = f("sigma_factor", 0.4)?;
        if !(sigma_factor >= 0.0) {
            bail!("sigma_factor must be nonnegative");
        }
        let constraint_mode = match get("constraint_mode").unwrap_or("lower_bound") {
            "none" => ConstraintMode::None,
            "lower_bound" => ConstraintMode::LowerBound,
            "equality" => ConstraintMode::Equality,
            other => bail!("constraint_mode = '{other}': expected none, lower_bound or equality"),
        };
        let self_flows = match get("self_flows").unwrap_or("exclude") {
            "exclude" => SelfFlowPolicy::Exclude,
            "include" => SelfFlowPolicy::Include,
            other => bail!("self_flows = '{other}': expected exclude or include"),
        };
        let b = |k: &str, d: bool| get(k).map_or(Ok(d), |v| parse_bool(k, v));
        let seed = get("seed").map(|v| parse::<u64>("seed", v)).transpose()?;
        let cfg = ExperimentConfig {
            source,
            synth,
            train_len: opt_u("train_len")?,
            test_len: opt_u("test_len")?,
            method,
            s,
            k,
            sigma_factor,
            constraint_mode,
            tolerance: f("tolerance", DEFAULT_TOLERANCE)?,
            max_iterations: u("max_iterations", DEFAULT_MAX_ITERATIONS)?,
            reselect_every: u("reselect_every", 1)?,
            lagged_measurements: b("lagged_measurements", false)?,
            renormalize: b("renormalize", false)?,
            self_flows,
            robust: b("robust", true)?,
            covariance_ridge: f("covariance_ridge", 1e-6)?,
            seed,
            repetitions: u("repetitions", 1)?,
            out: PathBuf::from(get("out").unwrap_or("out")),
        };
        if cfg.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        if cfg.is_stochastic() && cfg.seed.is_none() {
            bail!("seed is required for synthetic data and for pme with sigma_factor > 0");
        }
        if cfg.repetitions > 1 && !cfg.is_stochastic() {
            bail!("repetitions > 1 only make sense with a seeded (stochastic) configuration");
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn is_stochastic(&self) -> bool {
        self.source == Source::Synth || (self.method == Method::Pme && self.sigma_factor > 0.0)
    }

    /// The seeds of the requested repetitions, `seed, seed + 1, ...`.
    pub fn seeds(&self) -> Vec<Option<u64>> {
        match self.seed {
            Some(s) => (0..self.repetitions as u64).map(|i| Some(s + i)).collect(),
            None => vec![None],
        }
    }

    /// Fills in dataset-dependent defaults: the standard splits and budgets for
    /// the two real datasets, otherwise an even split, `s = ceil(0.85 m)` and `k = n`.
    pub fn resolve(&self, n: usize, m: usize, samples: usize) -> Result<Resolved> {
        let (train_d, test_d, s_d, k_d) = match self.source {
            Source::Abilene(_) => (500, 1500, 35, 11),
            Source::Geant(_) => (1500, 500, 65, 23),
            _ => {
                let train = samples / 2;
                (train, samples - train, ((0.85 * m as f64).ceil() as usize).clamp(1, m), n)
            }
        };
        let train_len = self.train_len.unwrap_or(train_d);
        let test_len = self.test_len.unwrap_or_else(|| test_d.min(samples.saturating_sub(train_len)));
        if train_len == 0 || test_len == 0 || train_len + test_len > samples {
            bail!("split {train_len} + {test_len} does not fit the {samples} available samples");
        }
        let s = self.s.unwrap_or(s_d.min(m));
        if s == 0 || s > m {
            bail!("s = {s} outside 1..={m}");
        }
        Ok(Resolved {
            train_len,
            test_len,
            s,
            k: self.k.unwrap_or(k_d),
        })
    }

    /// Every key with the value actually used.
    pub fn echo(&self, resolved: Option<&Resolved>, seed: Option<u64>) -> String {
        let mut out = String::new();
        let (source, path) = match &self.source {
            Source::Synth => ("synth", String::new()),
            Source::Canonical(p) => ("canonical", p.display().to_string()),
            Source::Abilene(p) => ("abilene", p.display().to_string()),
            Source::Geant(p) => ("geant", p.display().to_string()),
        };
        let sy = &self.synth;
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        let (train, test, s, k) = match resolved {
            Some(r) => (r.train_len.to_string(), r.test_len.to_string(), r.s.to_string(), r.k.to_string()),
            None => (opt(self.train_len), opt(self.test_len), opt(self.s), opt(self.k)),
        };
        let rows: Vec<(&str, String)> = vec![
            ("source", source.into()),
            ("path", path),
            ("topology", if sy.topology == SynthTopology::Toy { "toy" } else { "random" }.into()),
            ("generator", if sy.generator == Generator::Exact { "exact" } else { "gravity" }.into()),
            ("nodes", sy.nodes.to_string()),
            ("degree", sy.degree.to_string()),
            ("samples", sy.samples.to_string()),
            ("mean_scale", sy.mean_scale.to_string()),
            ("noise_cv", sy.noise_cv.to_string()),
            ("period", sy.period.to_string()),
            ("amplitude", sy.amplitude.to_string()),
            ("phase_spread", sy.phase_spread.to_string()),
            ("coupling", sy.coupling.to_string()),
            ("timestep_seconds", sy.timestep_seconds.to_string()),
            ("train_len", train),
            ("test_len", test),
            ("method", self.method.name().into()),
            ("s", if self.method == Method::Csdme { s } else { String::new() }),
            ("k", if matches!(self.method, Method::Pca | Method::Cur) { k } else { String::new() }),
            ("sigma_factor", if self.method == Method::Pme { self.sigma_factor.to_string() } else { String::new() }),
            ("constraint_mode", mode_name(self.constraint_mode).into()),
            ("tolerance", self.tolerance.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            ("reselect_every", self.reselect_every.to_string()),
            ("lagged_measurements", self.lagged_measurements.to_string()),
            ("renormalize", self.renormalize.to_string()),
            ("self_flows", if self.self_flows == SelfFlowPolicy::Include { "include" } else { "exclude" }.into()),
            ("robust", self.robust.to_string()),
            ("covariance_ridge", self.covariance_ridge.to_string()),
            ("seed", seed.or(self.seed).map(|s| s.to_string()).unwrap_or_default()),
            ("repetitions", self.repetitions.to_string()),
            ("out", self.out.display().to_string()),
        ];
        debug_assert_eq!(rows.len(), KEYS.len());
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
