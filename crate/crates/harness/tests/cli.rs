use std::path::Path;
use std::process::{Command, Output};

use hamtomo::bayes::ModelFit;
use hamtomo::sim::read_traces;
use hamtomo_harness::config::{RunConfig, SeedingOptions};
use hamtomo_harness::pipeline::estimate;
use hamtomo_harness::report::ErrorReport;

fn hamtomo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamtomo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"n_systems": 2, "n_list": [1025], "ne_list": [125], "seed": 11}"#).unwrap();
    cfg
}

#[test]
fn pipeline_writes_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let res = hamtomo(&["pipeline", "--config", path(&cfg), "--out", path(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: ErrorReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert_eq!(report.failures(), 0);
    let tables = std::fs::read_to_string(out.join("tables.csv")).unwrap();
    assert!(tables.starts_with("table,n,ne,"));
    assert_eq!(tables.lines().count(), 2);
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(hamtomo(&["pipeline", "--config", path(&cfg), "--out", path(out)]).status.success());
    }
    let ra: ErrorReport = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let rb: ErrorReport = serde_json::from_str(&std::fs::read_to_string(b.join("report.json")).unwrap()).unwrap();
    assert_eq!(ra.cells, rb.cells);
    assert_eq!(
        std::fs::read(a.join("tables.csv")).unwrap(),
        std::fs::read(b.join("tables.csv")).unwrap()
    );
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let res = hamtomo(&["simulate", "--seed", "7", "--n", "257", "--out", path(out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn estimate_matches_library_fit() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.csv");
    let fit_path = dir.path().join("fit.json");
    let spectrum = dir.path().join("spectrum.csv");
    assert!(hamtomo(&["simulate", "--seed", "3", "--n", "1025", "--ne", "250", "--out", path(&traces)]).status.success());
    let res = hamtomo(&[
        "estimate",
        "--traces",
        path(&traces),
        "--dump-spectrum",
        path(&spectrum),
        "--out",
        path(&fit_path),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(spectrum.exists());
    let cli: ModelFit = serde_json::from_str(&std::fs::read_to_string(&fit_path).unwrap()).unwrap();
    let cfg = RunConfig::default();
    let seeding: SeedingOptions = cfg.seeding;
    let lib = estimate(&read_traces(&traces).unwrap(), &seeding, &cfg.estimator).unwrap().fit;
    assert_eq!(cli.frequencies, lib.frequencies);
    assert_eq!(cli.log_likelihood, lib.log_likelihood);

    let rec = dir.path().join("rec.json");
    let res = hamtomo(&["reconstruct", "--fit", path(&fit_path), "--out", path(&rec)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let res = hamtomo(&["pipeline", "--no-such-flag"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn missing_input_is_reported() {
    let res = hamtomo(&["estimate", "--traces", "/nonexistent/traces.csv"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));
}
