use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn exitctl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitctl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

/// Field `column` of the first data row.
fn first_row_field(csv: &str, column: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|&h| h == column).unwrap();
    row[k].to_string()
}

#[test]
fn tangency_below_parabola_exits_early() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "simulate",
            "--model",
            "tangency",
            "--s",
            "0",
            "--x0",
            "0.5",
            "--n-paths",
            "1",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let tau: f64 = first_row_field(&csv, "tau").parse().unwrap();
    assert!((tau - (1.0 - 0.5f64.sqrt())).abs() < 1e-6, "tau = {tau}");
    assert_eq!(first_row_field(&csv, "exited"), "true");
}

#[test]
fn tangency_above_parabola_survives_to_horizon() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "simulate",
            "--model",
            "tangency",
            "--x0",
            "1.5",
            "--n-paths",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(first_row_field(&csv, "tau").parse::<f64>().unwrap(), 2.0);
    assert_eq!(first_row_field(&csv, "exited"), "false");
}

#[test]
fn reruns_with_the_same_seed_are_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let args = [
        "simulate",
        "--model",
        "reinsurance",
        "--x0",
        "1",
        "--control",
        "0.5",
        "--n-paths",
        "1",
        "--dt",
        "0.01",
        "--seed",
        "17",
        "--keep-paths",
        "1",
    ];
    assert!(exitctl(&args, a.path()).status.success());
    assert!(exitctl(&args, b.path()).status.success());
    for name in [
        "summary.csv",
        "summary.meta.json",
        "paths/path_00000.csv",
        "paths/path_00000.meta.json",
    ] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn sidecar_records_seed_model_and_parameters() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "simulate",
            "--model",
            "reinsurance",
            "--x0",
            "1",
            "--n-paths",
            "2",
            "--dt",
            "0.01",
            "--seed",
            "5",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["model"], "reinsurance");
    assert_eq!(meta["model_parameters"]["discount_rate"], 0.05);
    assert_eq!(meta["parameters"]["n_paths"], 2);
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
    assert!(meta.get("timestamp").is_none());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let unknown = exitctl(&["simulate", "--model", "no_such_model"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    let missing = exitctl(&["simulate"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    let bad_step = exitctl(
        &["simulate", "--model", "tangency", "--dt", "-1"],
        dir.path(),
    );
    assert_eq!(bad_step.status.code(), Some(2));
    let bad_flag = exitctl(
        &["simulate", "--model", "tangency", "--n-paths", "many"],
        dir.path(),
    );
    assert_eq!(bad_flag.status.code(), Some(2));
    let outside = exitctl(
        &["simulate", "--model", "reinsurance", "--control", "2"],
        dir.path(),
    );
    assert_eq!(outside.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "solve", "--model", "tangency", "--n-x", "100", "--n-t", "10",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("CFL"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"model": "tangency", "seed": 3, "start": {"x0": 1.5}, "monte_carlo": {"n_paths": 4, "dt": 0.001}}"#,
    )
    .unwrap();
    let out = exitctl(
        &["simulate", "--config", cfg.to_str().unwrap(), "--x0", "0.5"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(first_row_field(&csv, "seed"), "3");
    assert!(first_row_field(&csv, "tau").parse::<f64>().unwrap() < 0.3);
}

#[test]
fn unknown_config_keys_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"model": "tangency", "monte_carlo": {"paths": 4}}"#,
    )
    .unwrap();
    let out = exitctl(&["simulate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_writes_grid_and_residual_report() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "solve",
            "--model",
            "brownian_exit",
            "--n-x",
            "40",
            "--scheme",
            "implicit",
            "--n-t",
            "1000",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("value.csv")).unwrap();
    assert!(csv.starts_with("t,x,regime,value,control\n"));
    assert_eq!(csv.lines().count(), 1 + 1001 * 41);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("solve.json")).unwrap()).unwrap();
    assert!(report["bellman_residual"]["max"].as_f64().unwrap() < 1e-9);
    assert!(report["metadata"]["upper_boundary"]
        .as_str()
        .unwrap()
        .starts_with("absorbing"));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("value.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["truncated_horizon"], false);
}

#[test]
fn truncated_horizon_is_flagged() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "solve",
            "--model",
            "reinsurance",
            "--x-max",
            "2",
            "--n-x",
            "10",
            "--n-u",
            "3",
            "--horizon",
            "0.5",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("value.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["truncated_horizon"], true);
    assert_eq!(meta["model_parameters"]["discount_rate"], 0.05);
}

#[test]
fn reproduce_tangency_shows_the_jump() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(&["reproduce", "tangency"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reproduce.json")).unwrap())
            .unwrap();
    let jump = report["statistics"]["jump_at_s0"].as_f64().unwrap();
    assert!(jump >= 0.9, "jump {jump}");
    let surface = fs::read_to_string(dir.path().join("surface.csv")).unwrap();
    assert!(surface.starts_with("s,x,regime,V\n"));
    assert!(dir.path().join("surface.meta.json").exists());
    assert!(dir.path().join("parabola.csv").exists());
}

#[test]
fn reproduce_certificates_match_closed_forms() {
    for target in ["noisy-tangency", "reinsurance"] {
        let dir = TempDir::new().unwrap();
        let out = exitctl(&["reproduce", target], dir.path());
        assert!(
            out.status.success(),
            "{target}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("reproduce.json")).unwrap())
                .unwrap();
        assert!(report["max_deviation_from_closed_form"].as_f64().unwrap() <= 1e-9);
        assert_eq!(report["superharmonic"]["passed"], true);
        let csv = fs::read_to_string(dir.path().join("generator.csv")).unwrap();
        assert!(csv.starts_with("t,regime,generator,closed_form\n"));
    }
}

#[test]
fn diagnose_continuity_writes_both_tables() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "diagnose-continuity",
            "--model",
            "tangency",
            "--n-paths",
            "10",
            "--dt",
            "0.01",
            "--epsilons",
            "0.1,0.01",
            "--x0s",
            "0.5",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a3 = fs::read_to_string(dir.path().join("penalty_onset.csv")).unwrap();
    assert!(a3.starts_with("epsilon,checkpoint_t,fraction,n_paths\n"));
    let values = fs::read_to_string(dir.path().join("penalized_value.csv")).unwrap();
    assert!(values.starts_with("epsilon,x0,V_eps_hat,std_error\n"));
    let v: Vec<f64> = values
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    // The auxiliary cost grows with epsilon when costs are non-negative.
    assert!(v[0] >= v[1]);
}

#[test]
fn check_regularity_reports_agreeing_verdicts() {
    let dir = TempDir::new().unwrap();
    let out = exitctl(
        &[
            "check-regularity",
            "--model",
            "noisy_tangency",
            "--n-paths",
            "200",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("regularity.json")).unwrap())
            .unwrap();
    assert_eq!(report["superharmonic"]["passed"], true);
    let estimates = report["monte_carlo_probe"]["estimates"].as_array().unwrap();
    assert!(estimates[0].as_f64().unwrap() >= 0.98);
}
