use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fairbid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairbid"))
        .args(args)
        .env("FAIRBID_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fairbid(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

fn sorted(k: &[&str]) -> Vec<String> {
    let mut k: Vec<String> = k.iter().map(|s| s.to_string()).collect();
    k.sort();
    k
}

#[test]
fn shipped_configs_validate() {
    for name in [
        "demo_exponential_pair.toml",
        "symmetric_pair.toml",
        "asymmetric_sweep.toml",
        "near_symmetric_sweep.toml",
        "ingest.toml",
        "asymmetric.json",
        "near_symmetric.json",
        "symmetric_pair.json",
        "demo_exponential_pair.json",
    ] {
        let out = fairbid(&["validate", "--config", configs().join(name).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn infeasible_bounds_exit_two_and_name_the_advertiser() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["validate", "solve"] {
        let out = run(cmd, &configs().join("infeasible.toml"), tmp.path(), &[]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("advertiser 0") || err.contains("advertiser `0`"), "{cmd}: {err}");
    }
}

#[test]
fn malformed_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\nmarket = 3\n").unwrap();
    let out = run("solve", &bad, tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let missing = run("solve", &tmp.path().join("nope.toml"), tmp.path(), &[]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn solve_matches_demo_closed_form_and_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run("solve", &configs().join("demo_exponential_pair.toml"), tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // Stationarity of the demo optimum: ln(2 - 2x) = (2/3) ln(4x/3).
    let f = |x: f64| (2.0 - 2.0 * x).ln() - (2.0 / 3.0) * (4.0 * x / 3.0).ln();
    let (mut lo, mut hi) = (0.5, 0.75);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((lo - 0.5791526954).abs() < 1e-9);

    let summary = read_json(&tmp.path().join("summary.json"));
    let rev = summary["revenue"].as_f64().unwrap();
    assert!((rev - 1.4896435645).abs() < 1e-4, "revenue {rev}");
    assert_eq!(
        keys(&summary),
        sorted(&[
            "schema_version",
            "revenue",
            "revenue_unconstrained",
            "kappa",
            "iterations",
            "best_iter",
            "converged",
            "parameters",
            "estimates",
            "warnings"
        ])
    );
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(keys(&read_json(&tmp.path().join("alpha.json"))), sorted(&["schema_version", "advertisers", "alpha"]));
    let cov = read_json(&tmp.path().join("coverage.json"));
    for k in ["schema_version", "coverage", "target", "proportional"] {
        assert!(cov.get(k).is_some(), "coverage.json lacks {k}");
    }
    let trace = std::fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    assert!(trace.lines().count() > 1);
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("symmetric_pair.toml");
    for dir in [&a, &b] {
        let out = run("simulate", &cfg, dir.path(), &["--seed", "5", "--samples", "40000", "--jobs", "2"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ja = std::fs::read_to_string(a.path().join("simulation.json")).unwrap();
    let jb = std::fs::read_to_string(b.path().join("simulation.json")).unwrap();
    assert_eq!(ja, jb);
    let v: Value = serde_json::from_str(&ja).unwrap();
    assert_eq!(v["samples"], 40000);
    assert_eq!(v["seed"], 5);
}

#[test]
fn sweep_writes_expected_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run("sweep", &configs().join("symmetric_pair.toml"), tmp.path(), &["--ell-grid", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "ell,kappa,d_tv,slift,revenue_F,revenue_M,solver_iters,kappa_sim,d_tv_sim,slift_sim,converged,status"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn ingest_emits_a_valid_market() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run("ingest", &configs().join("ingest.toml"), tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&tmp.path().join("ingest.json"));
    assert_eq!(report["schema_version"], 1);
    let markets: Vec<PathBuf> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("market_"))
        .collect();
    assert!(!markets.is_empty());
    for m in markets {
        let v = fairbid(&["validate", "--config", m.to_str().unwrap()]);
        assert_eq!(v.status.code(), Some(0), "{}", String::from_utf8_lossy(&v.stderr));
    }
}
