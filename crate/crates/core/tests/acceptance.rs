//! One line per acceptance item: `ACCEPTANCE <id> PASS|FAIL|SKIP <summary>`.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tomograph::baselines::{run_baseline, train_pca_basis, train_pme_basis, BaselineOptions};
use tomograph::demand::{build_phi, build_psi, CompressedMeasurement, DemandTransform, SelfFlowPolicy};
use tomograph::estimator::{init_state, link_covariance, run, step, EstimatorConfig, EstimatorState, PsiSource};
use tomograph::evaluate::{bias_and_stddev, sre, tre, Cdf};
use tomograph::ingest::{parse_abilene, parse_geant_xml, split, DatasetBundle, SplitSpec};
use tomograph::netmodel::{
    gen_exact_model, gen_gravity_traffic, gen_topology, toy_network, ExactModelParams, GravityParams,
};
use tomograph::numerics::{solve_cwls, svd, ConstraintMode, CwlsProblem};
use tomograph::subset::{select_links, slice_system};

fn report(id: &str, ok: bool, summary: String) {
    println!("ACCEPTANCE {id} {} {summary}", if ok { "PASS" } else { "FAIL" });
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn criterion_1_toy_golden() {
    let start = Instant::now();
    let (_, a) = toy_network();
    let x = DVector::from_vec(vec![0., 6., 4., 5., 0., 5., 7., 3., 0.]);
    let psi = build_psi(&x, 3, SelfFlowPolicy::Exclude).unwrap();
    let expected_psi = DMatrix::from_row_slice(9, 3, &[
        0.0, 0.0, 0.0, //
        0.6, 0.0, 0.0,
        0.4, 0.0, 0.0,
        0.0, 0.5, 0.0,
        0.0, 0.0, 0.0,
        0.0, 0.5, 0.0,
        0.0, 0.0, 0.7,
        0.0, 0.0, 0.3,
        0.0, 0.0, 0.0,
    ]);
    let pattern_ok = (0..9).all(|k| (0..3).all(|j| (psi.matrix()[(k, j)] != 0.0) == (expected_psi[(k, j)] != 0.0)));
    let psi_err = (psi.matrix() - &expected_psi).amax();
    let phi = build_phi(&a, &psi).unwrap();
    let expected_phi = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.7, 0.4, 0.5, 0.0, 0.0, 0.0, 1.0]);
    let phi_err = (phi.matrix() - &expected_phi).amax();
    let y = a.matrix() * &x;
    let y_expected = DVector::from_vec(vec![10.0, 12.0, 9.0, 10.0]);
    let y_err = rel(&y, &y_expected);

    let mut state = EstimatorState::new(PsiSource::Fixed(psi), a, DMatrix::zeros(4, 4), EstimatorConfig::new(4)).unwrap();
    let r = step(&mut state, 0, &y).unwrap();
    let xc_err = rel(&r.xc_hat, &DVector::from_element(3, 10.0));
    let x_err = rel(&r.x_hat, &x);
    let elapsed = start.elapsed().as_secs_f64();

    let ok = pattern_ok && psi_err <= 1e-6 && phi_err <= 1e-6 && y_err <= 1e-6 && xc_err <= 1e-6 && x_err <= 1e-6 && elapsed < 1.0;
    report(
        "1",
        ok,
        format!("toy network: Psi pattern {pattern_ok}, Phi err {phi_err:.1e}, Y err {y_err:.1e}, Xc err {xc_err:.1e}, X err {x_err:.1e}, {elapsed:.3}s"),
    );
    assert!(ok);
}

/// Max over test steps of `||x_hat - x|| / ||x||` with 200 training and 200 test steps.
fn exact_model_error(seed: u64, params: &ExactModelParams, s_of: impl Fn(usize, usize) -> usize) -> f64 {
    let (topo, a) = gen_topology(seed, 11, 41.0 / 11.0).unwrap();
    let model = gen_exact_model(seed, &a, 400, params).unwrap();
    let bundle = DatasetBundle::new(topo, a, model.series, "exact").unwrap();
    let (train, test) = split(&bundle, SplitSpec::new(200, 200).unwrap()).unwrap();
    let s = s_of(bundle.node_count(), bundle.link_count());
    let mut state = init_state(&train, EstimatorConfig::new(s)).unwrap();
    let trace = run(&mut state, &test, test.len()).unwrap();
    tre(&trace.estimates(), &test.traffic.values).unwrap().max()
}

#[test]
fn criterion_2_exact_model() {
    let start = Instant::now();
    let default = ExactModelParams::default();
    let slow = ExactModelParams {
        period: 2000.0,
        ..ExactModelParams::default()
    };
    let seed = 3;
    let full = exact_model_error(seed, &default, |_, m| m);
    let narrow_slow = exact_model_error(seed, &slow, |n, _| n);
    let narrow_default = exact_model_error(seed, &default, |n, _| n);
    let elapsed = start.elapsed().as_secs_f64();
    println!("ACCEPTANCE 2 INFO s=n with demand period 400: max relative error {narrow_default:.3e}");
    let ok = full <= 1e-5 && narrow_slow <= 1e-3 && elapsed < 30.0;
    report(
        "2",
        ok,
        format!("exact model: s=m max rel err {full:.2e}, s=n (period 2000) {narrow_slow:.2e}, {elapsed:.1}s"),
    );
    assert!(ok);
}

fn headline(bundle: &DatasetBundle, spec: SplitSpec, s: usize) -> (f64, f64) {
    let (train, test) = split(bundle, spec).unwrap();
    let mut state = init_state(&train, EstimatorConfig::new(s)).unwrap();
    let trace = run(&mut state, &test, test.len()).unwrap();
    let est = trace.estimates();
    let sre = Cdf::from_values(sre(&est, &test.traffic.values).unwrap().as_slice());
    let tre = Cdf::from_values(tre(&est, &test.traffic.values).unwrap().as_slice());
    (sre.fraction_at_or_below(0.8), tre.fraction_at_or_below(0.3))
}

#[test]
fn criterion_3_real_archives() {
    let abilene = std::env::var_os("TOMOGRAPH_ABILENE_DIR").map(PathBuf::from);
    let geant = std::env::var_os("TOMOGRAPH_GEANT_DIR").map(PathBuf::from);
    if abilene.is_none() && geant.is_none() {
        println!(
            "ACCEPTANCE 3 SKIP real Abilene/GEANT archives not supplied (set TOMOGRAPH_ABILENE_DIR / TOMOGRAPH_GEANT_DIR); not reproducible without them"
        );
        return;
    }
    let mut ok = true;
    let mut parts = Vec::new();
    if let Some(dir) = abilene {
        let bundle = parse_abilene(&dir).unwrap();
        let (sre_frac, tre_frac) = headline(&bundle, SplitSpec::ABILENE, 35);
        ok &= sre_frac >= 0.8 && tre_frac >= 0.7;
        parts.push(format!("Abilene SRE<0.8 for {:.0}%, TRE<=0.3 for {:.0}%", sre_frac * 100.0, tre_frac * 100.0));
    }
    if let Some(dir) = geant {
        let bundle = parse_geant_xml(&dir).unwrap();
        let (train, test) = split(&bundle, SplitSpec::GEANT).unwrap();
        let mut state = init_state(&train, EstimatorConfig::new(65)).unwrap();
        let trace = run(&mut state, &test, test.len()).unwrap();
        let tre = Cdf::from_values(tre(&trace.estimates(), &test.traffic.values).unwrap().as_slice());
        let frac = tre.fraction_at_or_below(0.2);
        ok &= frac >= 0.85;
        parts.push(format!("GEANT TRE<0.2 for {:.0}%", frac * 100.0));
    }
    report("3", ok, parts.join("; "));
    assert!(ok);
}

fn shape_check(seed: u64, n: usize, m: usize) -> (bool, String) {
    let (topo, a) = gen_topology(seed, n, m as f64 / n as f64).unwrap();
    let x = gen_gravity_traffic(seed, &topo, 50, &GravityParams::default()).unwrap();
    let mean = x.values.row_mean().transpose();
    let psi = build_psi(&mean, n, SelfFlowPolicy::Exclude).unwrap();
    let phi = build_phi(&a, &psi).unwrap();
    let ra = svd(a.matrix()).unwrap().rank(1e-10);
    let rp = svd(phi.matrix()).unwrap().rank(1e-10);
    let (sa, sp) = (a.matrix().shape(), phi.matrix().shape());
    let ok = sa == (m, n * n) && ra == m && sp == (m, n) && rp == n;
    (ok, format!("A {}x{} rank {ra}, Phi {}x{} rank {rp}", sa.0, sa.1, sp.0, sp.1))
}

#[test]
fn criterion_4_rank_and_shape() {
    let (ok_a, msg_a) = shape_check(3, 11, 41);
    let (ok_g, msg_g) = shape_check(5, 23, 74);
    report("4", ok_a && ok_g, format!("Abilene-shaped: {msg_a}; GEANT-shaped: {msg_g}"));
    assert!(ok_a && ok_g);
}

fn brute_force_nnls(d: &DMatrix<f64>, t: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    let n = d.ncols();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut x = DVector::zeros(n);
        if !free.is_empty() {
            let df = d.select_columns(&free);
            let Some(sol) = (df.transpose() * w * &df).lu().solve(&(df.transpose() * w * t)) else {
                continue;
            };
            if sol.iter().any(|v| *v < 0.0) {
                continue;
            }
            for (k, &i) in free.iter().enumerate() {
                x[i] = sol[k];
            }
        }
        let r = t - d * &x;
        best = best.min((r.transpose() * w * &r)[(0, 0)]);
    }
    best
}

#[test]
fn criterion_5_solver_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=8);
        let k = n + rng.gen_range(0..=4);
        let d = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
        let t = DVector::from_fn(k, |_, _| rng.gen_range(-3.0..3.0));
        let b = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
        let w = &b * b.transpose() + DMatrix::identity(k, k) * 0.5;
        let sol = solve_cwls(&CwlsProblem::new(d.clone(), t.clone(), w.clone()).with_mode(ConstraintMode::None)).unwrap();
        worst = worst.max((sol.objective - brute_force_nnls(&d, &t, &w)).abs());
    }
    let ok = worst <= 1e-8;
    report("5", ok, format!("500 random problems, worst objective gap {worst:.2e}"));
    assert!(ok);
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < m - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

fn sigma_min(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.min()
}

#[test]
fn criterion_6_subset_quality() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(n..=12);
        let p = DMatrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0));
        let phi = CompressedMeasurement::from_matrix(p.clone()).unwrap();
        let sel = select_links(&phi, n).unwrap();
        let (_, phi_s) = slice_system(&sel, &DVector::zeros(m), &phi).unwrap();
        let best = combinations(m, n)
            .iter()
            .map(|rows| sigma_min(&p.select_rows(rows)))
            .fold(0.0, f64::max);
        worst = worst.min(sigma_min(&phi_s) / best);
    }
    let ok = worst >= 0.3;
    report("6", ok, format!("100 random Phi, worst greedy/exhaustive sigma_min ratio {worst:.3}"));
    assert!(ok);
}

fn naive_rel(diff: &[f64], reference: &[f64]) -> f64 {
    let num = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    match (den == 0.0, num == 0.0) {
        (true, true) => 0.0,
        (true, false) => f64::INFINITY,
        _ => num / den,
    }
}

fn gap(a: f64, b: f64) -> f64 {
    if a.is_infinite() || b.is_infinite() {
        if a == b { 0.0 } else { f64::INFINITY }
    } else {
        (a - b).abs() / (1.0 + b.abs())
    }
}

#[test]
fn criterion_7_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (t_len, flows) = (rng.gen_range(2..=15), rng.gen_range(1..=12));
        let x = DMatrix::from_fn(t_len, flows, |_, _| if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(0.0..1e3) });
        let est = DMatrix::from_fn(t_len, flows, |_, _| rng.gen_range(0.0..1e3));
        let s = sre(&est, &x).unwrap();
        let r = tre(&est, &x).unwrap();
        let (b, sd) = bias_and_stddev(&est, &x).unwrap();
        let sd = sd.unwrap();
        for i in 0..flows {
            let diff: Vec<f64> = (0..t_len).map(|t| est[(t, i)] - x[(t, i)]).collect();
            let refv: Vec<f64> = (0..t_len).map(|t| x[(t, i)]).collect();
            worst = worst.max(gap(s[i], naive_rel(&diff, &refv)));
            let mean = diff.iter().sum::<f64>() / t_len as f64;
            let var = diff.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (t_len - 1) as f64;
            worst = worst.max(gap(b[i], mean)).max(gap(sd[i], var.sqrt()));
        }
        for t in 0..t_len {
            let diff: Vec<f64> = (0..flows).map(|i| est[(t, i)] - x[(t, i)]).collect();
            let refv: Vec<f64> = (0..flows).map(|i| x[(t, i)]).collect();
            worst = worst.max(gap(r[t], naive_rel(&diff, &refv)));
        }
    }
    let ok = worst <= 1e-12;
    report("7", ok, format!("1000 random instances, worst deviation {worst:.2e}"));
    assert!(ok);
}

#[test]
fn criterion_8_baseline_sanity() {
    let (topo, a) = gen_topology(8, 11, 41.0 / 11.0).unwrap();
    let params = ExactModelParams {
        coupling: 0.0,
        ..ExactModelParams::default()
    };
    let model = gen_exact_model(8, &a, 300, &params).unwrap();
    let bundle = DatasetBundle::new(topo, a.clone(), model.series.clone(), "exact").unwrap();
    let (train, test) = split(&bundle, SplitSpec::new(200, 100).unwrap()).unwrap();
    let y_test = test.link_series();
    let cov = link_covariance(&train.link_series());

    let pme = train_pme_basis(&train.traffic, &a, 0.0, 8, SelfFlowPolicy::Exclude).unwrap();
    let pme_trace = run_baseline(&pme, &a, &y_test, &cov, &BaselineOptions::default()).unwrap();
    let psi0 = DemandTransform::new(11, model.psi_base.clone()).unwrap();
    let mut state = EstimatorState::new(PsiSource::Fixed(psi0), a.clone(), cov, EstimatorConfig::new(a.link_count())).unwrap();
    let cs_trace = run(&mut state, &test, test.len()).unwrap();
    let (pe, ce) = (pme_trace.estimates(), cs_trace.estimates());
    let pme_gap = (&pe - &ce).amax() / ce.amax();

    let x = &train.traffic;
    let errors: Vec<f64> = (1..=40)
        .map(|k| train_pca_basis(x, &a, k).unwrap().projection_error(x))
        .collect();
    let monotone = errors.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-9);

    let ok = pme_gap <= 1e-5 && monotone;
    report(
        "8",
        ok,
        format!(
            "PME(sigma=0) vs fixed-Psi estimator max rel gap {pme_gap:.2e}; PCA training error nonincreasing over k=1..40: {monotone} ({:.3e} -> {:.3e})",
            errors[0],
            errors[errors.len() - 1]
        ),
    );
    assert!(ok);
}

fn benchmark_sre(seed: u64, s_of: &dyn Fn(usize, usize) -> usize, mode: ConstraintMode) -> f64 {
    let (topo, a) = gen_topology(seed, 8, 3.0).unwrap();
    let params = GravityParams {
        noise_cv: 0.2,
        phase_spread: 0.5,
        ..GravityParams::default()
    };
    let x = gen_gravity_traffic(seed, &topo, 300, &params).unwrap();
    let bundle = DatasetBundle::new(topo, a, x, "gravity").unwrap();
    let (train, test) = split(&bundle, SplitSpec::new(200, 100).unwrap()).unwrap();
    let s = s_of(bundle.node_count(), bundle.link_count());
    let mut config = EstimatorConfig::new(s);
    config.constraint_mode = mode;
    let mut state = init_state(&train, config).unwrap();
    let trace = run(&mut state, &test, test.len()).unwrap();
    let v = sre(&trace.estimates(), &test.traffic.values).unwrap();
    let finite: Vec<f64> = v.iter().cloned().filter(|e| e.is_finite()).collect();
    finite.iter().sum::<f64>() / finite.len() as f64
}

type Budget<'a> = (&'a str, &'a (dyn Fn(usize, usize) -> usize + Sync));

/// Mean SRE over seeds 100..120 for each budget.
fn budget_sweep(budgets: &[Budget], mode: ConstraintMode) -> (bool, String) {
    let means: Vec<f64> = budgets
        .iter()
        .map(|(_, f)| {
            let per_seed: Vec<f64> = (0..20u64).into_par_iter().map(|seed| benchmark_sre(100 + seed, *f, mode)).collect();
            per_seed.iter().sum::<f64>() / per_seed.len() as f64
        })
        .collect();
    let ok = means.windows(2).all(|w| w[1] <= w[0]);
    let detail: Vec<String> = budgets.iter().zip(&means).map(|((name, _), v)| format!("s={name}: {v:.4}")).collect();
    (ok, detail.join(", "))
}

#[test]
fn criterion_9_budget_trend() {
    let budgets: [Budget; 3] = [
        ("n", &|n, _| n),
        ("ceil(0.85m)", &|_, m| (0.85 * m as f64).ceil() as usize),
        ("m", &|_, m| m),
    ];
    let (free_ok, free_detail) = budget_sweep(&budgets, ConstraintMode::None);
    println!("ACCEPTANCE 9 INFO constraint_mode=none, mean SRE over 20 seeds, {free_detail} (nonincreasing: {free_ok})");
    let (ok, detail) = budget_sweep(&budgets, ConstraintMode::default());
    report("9", ok, format!("default constraint_mode=lower_bound, mean SRE over 20 seeds, {detail}"));
    assert!(ok);
}
