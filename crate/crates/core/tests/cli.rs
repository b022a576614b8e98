use std::path::Path;
use std::process::{Command, Output};

fn ftdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftdc")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn init_prints_budget_and_gains() {
    let o = ftdc(&["init", "--scenario", "paper-4node"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("m̄ = "));
    assert!(s.contains("leader 0"));
    assert!(s.contains("K_4 = "));
    assert!(s.contains("eig(A − ΣL_iC_i/N)"));
}

#[test]
fn simulate_writes_monotone_time_column() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let o = ftdc(&["simulate", "--scenario", "paper-4node", "--tau", "1", "--horizon", "60", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rd = csv::Reader::from_path(&out).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["k", "t", "norm_x", "norm_ebar", "norm_e_1", "norm_e_2", "norm_e_3", "norm_e_4", "rounds_used"]);
    let times: Vec<f64> = rd.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(times.len(), 61);
    assert!(times.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn tau_sweep_writes_one_file_per_tau() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.csv");
    let o = ftdc(&["export", "--tau", "0.5", "--tau", "2", "--horizon", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    for name in ["run_tau0.5.csv", "run_tau2.csv"] {
        assert!(Path::new(&dir.path().join(name)).exists(), "{name}");
    }
}

#[test]
fn export_csv_to_stdout_and_gains_json() {
    let o = ftdc(&["export", "--tau", "1", "--horizon", "0", "--format", "csv"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert_eq!(s.lines().count(), 2);
    assert!(s.starts_with("k,t,norm_x"));
    let o = ftdc(&["export", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["k"].as_array().unwrap().len(), 4);
    assert_eq!(v["leader"], 0);
}

#[test]
fn init_writes_config_that_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.json");
    assert!(ftdc(&["init", "--out", cfg.to_str().unwrap()]).status.success());
    let o = ftdc(&["init", "--scenario", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), stdout(&ftdc(&["init"])));
}

#[test]
fn verify_exit_status_follows_results() {
    let o = ftdc(&["verify", "--scenario", "paper-4node"]);
    let s = stdout(&o);
    assert_eq!(s.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 11);
    assert_eq!(o.status.success(), !s.contains("FAIL"));
}

#[test]
fn verify_custom_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pair.json");
    std::fs::write(
        &cfg,
        r#"{"name": "pair", "graph": {"nodes": 2, "edges": [[0, 1], [1, 0]]},
        "plant": {"a": [[1.1, 1.0], [0.0, 1.2]], "b": [[[1.0], [0.0]], [[0.0], [1.0]]], "c": [[[1.0, 0.0]], [[0.0, 1.0]]]},
        "controller_targets": [0.3, 0.2], "observer_targets": [0.1, 0.05], "x0": [1.0, -1.0], "horizon": 30, "taus": [0.1, 1.0, 10.0]}"#,
    )
    .unwrap();
    let o = ftdc(&["verify", "--scenario", cfg.to_str().unwrap()]);
    let s = stdout(&o);
    assert!(o.status.success(), "{s}");
    assert!(s.lines().all(|l| !l.starts_with("FAIL")));
}

#[test]
fn usage_and_validation_errors_exit_nonzero() {
    assert!(!ftdc(&["simulate", "--bogus"]).status.success());
    assert!(!ftdc(&["frobnicate"]).status.success());
    let o = ftdc(&["init", "--scenario", "no-such-scenario"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown built-in scenario"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("oneway.json");
    std::fs::write(
        &cfg,
        r#"{"name": "oneway", "graph": {"nodes": 2, "edges": [[0, 1]]},
        "plant": {"a": [[1.1, 0.0], [0.0, 1.2]], "b": [[[1.0], [0.0]], [[0.0], [1.0]]], "c": [[[1.0, 0.0]], [[0.0, 1.0]]]},
        "controller_targets": [0.3, 0.2], "observer_targets": [0.1, 0.05], "horizon": 3, "taus": [1.0]}"#,
    )
    .unwrap();
    let o = ftdc(&["simulate", "--scenario", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not strongly connected"));
}
