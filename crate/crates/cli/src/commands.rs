use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;

use tomograph::baselines::{run_baseline, train_cur_basis, train_pca_basis, train_pme_basis, BaselineOptions};
use tomograph::demand::{build_phi, build_psi, RegressorOptions};
use tomograph::estimator::{init_state, link_covariance, run, EstimatorConfig, PsiSource, RunTrace};
use tomograph::evaluate::{mean_variance_table, metric_report, spectrum_report, write_mean_variance, MetricReport, RANK_RTOL};
use tomograph::ingest::{
    impute_gaps, load_canonical, parse_abilene, parse_geant_xml, read_raw_tm, split, write_canonical, DatasetBundle,
    SplitSpec,
};
use tomograph::netmodel::{
    gen_exact_model, gen_gravity_traffic, gen_topology, toy_network, ExactModelParams, GravityParams,
};
use tomograph::numerics::svd;

use crate::config::{ExperimentConfig, Generator, Method, Resolved, Source, SynthTopology};

/// Flagged-step fraction above which `run` exits with status 2.
pub const FLAG_LIMIT: f64 = 0.10;

/// Output directory: `TOMOGRAPH_OUT` wins over the configured one.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os("TOMOGRAPH_OUT").map(PathBuf::from).unwrap_or_else(|| cfg.out.clone())
}

fn synthesize(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetBundle> {
    let p = &cfg.synth;
    let (topo, a) = match p.topology {
        SynthTopology::Random => gen_topology(seed, p.nodes, p.degree)?,
        SynthTopology::Toy => toy_network(),
    };
    let series = match p.generator {
        Generator::Gravity => {
            let params = GravityParams {
                mean_scale: p.mean_scale,
                temporal_period: Some(p.period),
                diurnal_amplitude: p.amplitude,
                phase_spread: p.phase_spread,
                noise_cv: p.noise_cv,
                timestep_seconds: p.timestep_seconds,
            };
            gen_gravity_traffic(seed, &topo, p.samples, &params)?
        }
        Generator::Exact => {
            let params = ExactModelParams {
                mean_scale: p.mean_scale,
                coupling: p.coupling,
                period: p.period,
                amplitude: p.amplitude,
                timestep_seconds: p.timestep_seconds,
            };
            gen_exact_model(seed, &a, p.samples, &params)?.series
        }
    };
    let label = format!("synthetic seed {seed}");
    Ok(DatasetBundle::new(topo, a, series, label)?)
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<DatasetBundle> {
    Ok(match &cfg.source {
        Source::Synth => synthesize(cfg, seed.expect("validated: synthetic data has a seed"))?,
        Source::Canonical(dir) => load_canonical(dir)?,
        Source::Abilene(dir) => parse_abilene(dir)?,
        Source::Geant(dir) => parse_geant_xml(dir)?,
    })
}

fn summary(bundle: &DatasetBundle) -> Result<String> {
    let rank = svd(bundle.routing.matrix())?.rank(RANK_RTOL);
    Ok(format!(
        "n={} m={} T={} rank(A)={rank}",
        bundle.node_count(),
        bundle.link_count(),
        bundle.len()
    ))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig, resolved: Option<&Resolved>, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join("resolved_config.txt");
    fs::write(&p, cfg.echo(resolved, seed)).with_context(|| format!("writing {}", p.display()))
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.source != Source::Synth {
        bail!("synth needs source = synth");
    }
    let out = output_dir(cfg);
    let bundle = synthesize(cfg, cfg.seed.expect("validated"))?;
    write_canonical(&out, &bundle)?;
    write_config(&out, cfg, None, cfg.seed)?;
    println!("{} -> {}", summary(&bundle)?, out.display());
    Ok(())
}

pub fn cmd_convert(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.source == Source::Synth {
        bail!("convert needs source = canonical, abilene or geant (use synth for generated data)");
    }
    let out = output_dir(cfg);
    let bundle = load_dataset(cfg, None)?;
    write_canonical(&out, &bundle)?;
    write_config(&out, cfg, None, None)?;
    println!("{} -> {}", summary(&bundle)?, out.display());
    Ok(())
}

/// Per-repetition outcome of `run`.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: Option<u64>,
    pub dir: PathBuf,
    pub flagged_fraction: f64,
    pub report: MetricReport,
}

fn split_bundle(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<(Resolved, DatasetBundle, DatasetBundle)> {
    let r = cfg.resolve(bundle.node_count(), bundle.link_count(), bundle.len())?;
    let (train, test) = split(bundle, SplitSpec::new(r.train_len, r.test_len)?)?;
    Ok((r, train, test))
}

fn run_method(cfg: &ExperimentConfig, r: &Resolved, seed: Option<u64>, train: &DatasetBundle, test: &DatasetBundle, dir: &Path) -> Result<RunTrace> {
    let a = &train.routing;
    let opts = BaselineOptions {
        constraint_mode: cfg.constraint_mode,
        tolerance: cfg.tolerance,
        max_iterations: cfg.max_iterations,
        covariance_ridge: cfg.covariance_ridge,
    };
    let baseline = |basis| -> Result<RunTrace> {
        let cov = link_covariance(&train.link_series());
        Ok(run_baseline(&basis, a, &test.link_series(), &cov, &opts)?)
    };
    match cfg.method {
        Method::Csdme => {
            let config = EstimatorConfig {
                monitored: r.s,
                constraint_mode: cfg.constraint_mode,
                tolerance: cfg.tolerance,
                max_iterations: cfg.max_iterations,
                renormalize: cfg.renormalize,
                reselect_every: cfg.reselect_every,
                lagged_measurements: cfg.lagged_measurements,
                covariance_ridge: cfg.covariance_ridge,
                regressor: RegressorOptions {
                    policy: cfg.self_flows,
                    robust: cfg.robust,
                    ..RegressorOptions::default()
                },
            };
            let mut state = init_state(train, config)?;
            if let PsiSource::Regressor(reg) = &state.psi_source {
                reg.save(&dir.join("model"))?;
            }
            Ok(run(&mut state, test, test.len())?)
        }
        Method::Pca => baseline(train_pca_basis(&train.traffic, a, r.k)?),
        Method::Cur => baseline(train_cur_basis(&train.traffic, a, r.k)?),
        Method::Pme => baseline(train_pme_basis(&train.traffic, a, cfg.sigma_factor, seed.unwrap_or(0), cfg.self_flows)?),
    }
}

fn run_once(cfg: &ExperimentConfig, seed: Option<u64>, dir: PathBuf) -> Result<RunOutcome> {
    let bundle = load_dataset(cfg, seed)?;
    let (r, train, test) = split_bundle(cfg, &bundle)?;
    info!("{}: {}, train {} test {}", cfg.method.name(), summary(&bundle)?, r.train_len, r.test_len);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let trace = run_method(cfg, &r, seed, &train, &test, &dir)?;
    trace.write(&dir)?;
    let report = metric_report(&trace.estimates(), &test.traffic.values, test.traffic.start_index)?;
    report.write(&dir)?;
    write_config(&dir, cfg, Some(&r), seed)?;
    Ok(RunOutcome {
        seed,
        dir,
        flagged_fraction: trace.flagged_fraction(),
        report,
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v[v.len() / 2]
}

/// Runs every repetition (in parallel over at most `jobs` threads) and
/// returns the outcomes in seed order.
pub fn cmd_run(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunOutcome>> {
    let out = output_dir(cfg);
    let seeds = cfg.seeds();
    let many = seeds.len() > 1;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let dir = match (many, seed) {
                    (true, Some(s)) => out.join(format!("seed_{s}")),
                    _ => out.clone(),
                };
                run_once(cfg, seed, dir)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for o in &outcomes {
        println!(
            "{} seed={} median SRE={:.4} median TRE={:.4} flagged={:.1}% -> {}",
            cfg.method.name(),
            o.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            median(o.report.sre.as_slice()),
            median(o.report.tre.as_slice()),
            o.flagged_fraction * 100.0,
            o.dir.display()
        );
    }
    Ok(outcomes)
}

pub fn cmd_spectrum(cfg: &ExperimentConfig) -> Result<()> {
    let out = output_dir(cfg);
    let seed = cfg.seed;
    let bundle = load_dataset(cfg, seed)?;
    let (r, train, _) = split_bundle(cfg, &bundle)?;
    let n = bundle.node_count();
    let mean = train.traffic.values.row_mean().transpose();
    let psi = build_psi(&mean, n, cfg.self_flows)?;
    let phi = build_phi(&bundle.routing, &psi)?;
    let report = spectrum_report(&bundle.routing, phi.matrix())?;
    report.write(&out)?;
    write_mean_variance(&out.join("mean_var.csv"), &mean_variance_table(&train.traffic)?)?;
    write_config(&out, cfg, Some(&r), seed)?;
    println!(
        "A: {} values, rank {}; Phi: {} values, rank {} -> {}",
        report.routing_spectrum.len(),
        report.routing_rank,
        report.phi_spectrum.len(),
        report.phi_rank,
        out.display()
    );
    Ok(())
}

/// Scores an `estimates.csv` against the configured dataset.
pub fn cmd_eval(cfg: &ExperimentConfig, estimates: &Path) -> Result<MetricReport> {
    let out = output_dir(cfg);
    let bundle = load_dataset(cfg, cfg.seed)?;
    let raw = read_raw_tm(estimates, bundle.node_count(), bundle.traffic.timestep_seconds)?;
    if raw.gap_count() > 0 {
        bail!("{} has {} empty entries", estimates.display(), raw.gap_count());
    }
    let est = impute_gaps(&raw);
    let start = est.start_index.checked_sub(bundle.traffic.start_index);
    let Some(start) = start.filter(|s| s + est.len() <= bundle.len()) else {
        bail!("estimates cover samples outside the dataset");
    };
    let truth = bundle.traffic.slice(start, est.len());
    let report = metric_report(&est.values, &truth.values, est.start_index)?;
    report.write(&out)?;
    write_config(&out, cfg, None, cfg.seed)?;
    println!(
        "{} steps, median SRE={:.4} median TRE={:.4} -> {}",
        est.len(),
        median(report.sre.as_slice()),
        median(report.tre.as_slice()),
        out.display()
    );
    Ok(report)
}
