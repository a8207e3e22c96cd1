use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tomograph(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tomograph"))
        .args(args)
        .env("TOMOGRAPH_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn synth_toy_summary_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = ["synth", "--set", "seed=4", "--set", "topology=toy", "--set", "samples=20"];
    let o = tomograph(&args, &a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("n=3 m=4 T=20 rank(A)=4"));
    assert_eq!(read(&a.join("meta.csv")).trim(), "3,4,300");
    tomograph(&args, &b);
    for f in ["tm.csv", "links.csv", "routing.csv", "meta.csv", "topology.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
}

#[test]
fn synth_rejects_single_node() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tomograph(&["synth", "--set", "seed=1", "--set", "nodes=1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nodes"));
}

#[test]
fn unknown_key_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tomograph(&["run", "--set", "seed=1", "--set", "monitored=3"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exact_model_full_monitoring_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    fs::write(
        &cfg,
        "# exact-model check\nsource = synth\ngenerator = exact\nnodes = 6\ndegree = 2.5\nsamples = 200\nseed = 11\ntrain_len = 120\ntest_len = 80\ns = 15\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    let o = tomograph(&["run", "-c", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sre = column(&read(&out.join("metrics.csv")), "sre");
    assert_eq!(sre.len(), 36);
    assert!(sre.iter().cloned().fold(0.0, f64::max) <= 1e-5);
    for f in ["estimates.csv", "demands.csv", "diagnostics.csv", "selection.csv", "tre.csv", "cdf_sre.csv", "cdf_tre.csv", "model/beta.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echo = read(&out.join("resolved_config.txt"));
    assert!(echo.contains("s = 15\n") && echo.contains("constraint_mode = lower_bound\n"));
}

#[test]
fn methods_share_metric_schema_and_eval_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = tomograph(&["synth", "--set", "seed=2", "--set", "nodes=5", "--set", "degree=2", "--set", "samples=120"], &data);
    assert!(o.status.success());
    let src = format!("path={}", data.display());
    let mut headers = Vec::new();
    for (method, extra) in [("csdme", "s=8"), ("pca", "k=5"), ("cur", "k=5"), ("pme", "sigma_factor=0")] {
        let out = tmp.path().join(method);
        let o = tomograph(
            &["run", "--set", "source=canonical", "--set", &src, "--set", &format!("method={method}"), "--set", extra],
            &out,
        );
        assert_ne!(o.status.code(), Some(1), "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let metrics = read(&out.join("metrics.csv"));
        headers.push(metrics.lines().next().unwrap().to_string());
        assert_eq!(metrics.lines().count(), 26);
    }
    assert!(headers.iter().all(|h| h == "od,mean,sre,bias,stddev"));

    let eval_out = tmp.path().join("eval");
    let est = tmp.path().join("pca/estimates.csv");
    let o = tomograph(
        &["eval", "--set", "source=canonical", "--set", &src, "--estimates", est.to_str().unwrap()],
        &eval_out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // The estimates file carries 12 significant digits.
    for (file, col) in [("metrics.csv", "sre"), ("metrics.csv", "bias"), ("tre.csv", "tre")] {
        let a = column(&read(&eval_out.join(file)), col);
        let b = column(&read(&tmp.path().join("pca").join(file)), col);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!(x == y || (x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{file} {col}: {x} vs {y}");
        }
    }
}

#[test]
fn spectrum_on_toy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    tomograph(&["synth", "--set", "seed=1", "--set", "topology=toy", "--set", "samples=10"], &data);
    let out = tmp.path().join("spec");
    let o = tomograph(&["spectrum", "--set", "source=canonical", "--set", &format!("path={}", data.display())], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spectrum = read(&out.join("spectrum.csv"));
    let a_rows: Vec<&str> = spectrum.lines().filter(|l| l.starts_with("A,")).collect();
    let phi_rows: Vec<&str> = spectrum.lines().filter(|l| l.starts_with("Phi,")).collect();
    assert_eq!((a_rows.len(), phi_rows.len()), (4, 3));
    assert!(a_rows[0].starts_with("A,1,1,") && phi_rows[0].starts_with("Phi,1,1,"));
    assert_eq!(read(&out.join("phi_surface.csv")).lines().count(), 13);
    assert_eq!(read(&out.join("mean_var.csv")).lines().count(), 10);
}

#[test]
fn repetitions_run_in_parallel_and_match_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |jobs: &'static str| {
        vec!["run", "--set", "seed=5", "--set", "repetitions=3", "--set", "nodes=4", "--set", "degree=2", "--set", "samples=80", "--jobs", jobs]
    };
    let (p, s) = (tmp.path().join("par"), tmp.path().join("ser"));
    assert!(tomograph(&args("3"), &p).status.code() != Some(1));
    assert!(tomograph(&args("1"), &s).status.code() != Some(1));
    for seed in 5..8 {
        let f = format!("seed_{seed}/estimates.csv");
        assert_eq!(read(&p.join(&f)), read(&s.join(&f)));
    }
    assert!(read(&p.join("seed_6/resolved_config.txt")).contains("seed = 6\n"));
}
