use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use spde_ldp_cli::config::{apply_override, parse_table, RunConfig};
use spde_ldp_cli::manifest::manifest;
use spde_ldp_cli::{resolve_config, CliError};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spde-ldp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn hash_of(text: &str) -> String {
    let config = RunConfig::from_table(parse_table(text).unwrap()).unwrap().resolve().unwrap();
    manifest(&config).0
}

const BASE: &str = r#"
seed = 3
eps = 0.1
[grid]
extents = [[0.0, 1.0]]
resolution = [32]
[coefficients]
preset = "burgers"
"#;

const REORDERED: &str = r#"
[coefficients]
preset = "burgers"

[grid]
resolution = [32]
extents = [[0.0, 1.0]]
"#;

#[test]
fn same_config_same_hash() {
    assert_eq!(hash_of(BASE), hash_of(BASE));
}

#[test]
fn reordered_keys_same_hash() {
    let reordered = format!("eps = 0.1\nseed = 3\n{}", REORDERED);
    assert_eq!(hash_of(BASE), hash_of(&reordered));
}

#[test]
fn explicit_defaults_same_hash() {
    let explicit = format!("k = 1\nhorizon = 1.0\n{BASE}");
    assert_eq!(hash_of(BASE), hash_of(&explicit));
}

#[test]
fn changed_seed_changes_hash() {
    assert_ne!(hash_of(BASE), hash_of(&BASE.replace("seed = 3", "seed = 4")));
}

#[test]
fn parse_error_reports_line_and_column() {
    let err = parse_table("seed = 1\neps = = 2\n").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 2"), "{msg}");
    assert!(msg.contains("column"), "{msg}");
}

#[test]
fn overrides_create_nested_keys() {
    let mut t = parse_table(BASE).unwrap();
    apply_override(&mut t, "grid.resolution=[8]").unwrap();
    apply_override(&mut t, "estimate.method=plain").unwrap();
    let c = RunConfig::from_table(t).unwrap().resolve().unwrap();
    assert_eq!(c.grid.resolution, vec![8]);
    assert_eq!(c.estimate.method, spde_ldp::ldp_lab::Method::Plain);
}

#[test]
fn default_rho_follows_nu_and_dimension() {
    // burgers has nu = 2, so max(2·2, 1 + 1) + 1 = 5.
    let c = resolve_config(None, &[], None, None).unwrap();
    assert_eq!(c.rho(), 5.0);
    let lin = resolve_config(None, &["coefficients.preset=linear_gaussian".into()], None, None).unwrap();
    assert_eq!(lin.rho(), 3.0);
}

#[test]
fn unknown_field_is_a_config_error() {
    let err = RunConfig::from_table(parse_table("rhoo = 3.0").unwrap()).unwrap_err();
    match err {
        CliError::Config { field, .. } => assert_eq!(field, "rhoo"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn missing_rho_without_nu_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[coefficients.custom]\nsigma = [1.0]\n").unwrap();
    let out = bin(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("`rho`"), "{stderr}");
}

#[test]
fn rho_not_above_dimension_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&[
        "skeleton",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "rho=1.0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`rho`"));
}

#[test]
fn verify_kernel_on_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["verify-kernel", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("kernel_report.json"));
    let lambda = report["lambda_p"].as_f64().unwrap();
    assert!((0.95..=1.05).contains(&lambda), "lambda = {lambda}");
    assert!(dir.path().join("eigenvalues.csv").exists());
    let m = read_json(&dir.path().join("manifest.json"));
    let config = resolve_config(None, &[], None, Some(dir.path())).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap(), manifest(&config).0);
}

fn parse_field_csv(path: &Path) -> Vec<(f64, f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

/// With f = g = 0 and no noise the field is the heat flow. On the grid,
/// sin(πx) is an exact eigenvector of the 3-point Dirichlet Laplacian with
/// eigenvalue (4/h²)·sin²(πh/2), so the heat flow is known in closed form.
#[test]
fn noiseless_linear_simulation_is_heat_flow() {
    let dir = tempfile::tempdir().unwrap();
    let n = 32;
    let out = bin(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "coefficients.preset=linear_gaussian",
        "--override",
        "eps=0.0",
        "--override",
        &format!("grid.resolution=[{n}]"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let h = 1.0 / n as f64;
    let lambda = 4.0 / (h * h) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
    let rows = parse_field_csv(&dir.path().join("field.csv"));
    assert_eq!(rows.len(), 65 * (n + 1));
    let worst = rows
        .iter()
        .map(|(t, x, v)| (v - (-lambda * t).exp() * (std::f64::consts::PI * x).sin()).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "max deviation from the heat flow {worst:e}");
}

#[test]
fn runs_are_reproducible_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, workers) in [(&a, "1"), (&b, "4")] {
        let out = bin(&[
            "simulate",
            "--out",
            dir.path().to_str().unwrap(),
            "--workers",
            workers,
            "--seed",
            "11",
            "--override",
            "paths=64",
            "--override",
            "grid.resolution=[16]",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ma = read_json(&a.path().join("manifest.json"));
    let mb = read_json(&b.path().join("manifest.json"));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["artifacts"], mb["artifacts"]);
    assert_eq!(ma["artifacts"].as_array().unwrap().len(), 3);
}

#[test]
fn numerical_failure_exits_3_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "solver.blow_up_threshold=0.5",
        "--override",
        "paths=4",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let diag = read_json(&dir.path().join("diagnostics.json"));
    assert_eq!(diag["details"]["kind"], "blow_up");
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["status"], "failed");
}

#[test]
fn minimize_action_writes_control_and_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&[
        "minimize-action",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "coefficients.preset=linear_gaussian",
        "--override",
        "grid.resolution=[16]",
        "--override",
        "dt=0.0625",
        "--override",
        "event.kind=threshold",
        "--override",
        "event.functional=integral",
        "--override",
        "event.level=0.2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let action = read_json(&dir.path().join("action.json"));
    assert_eq!(action["feasible"], true);
    let value = action["value"].as_f64().unwrap();
    // The control CSV integrates to the same action: I = ½ Σ_m Σ_j φ² Δt over
    // the 16 step rows; the closing row at T repeats the last value.
    let text = fs::read_to_string(dir.path().join("control.csv")).unwrap();
    let integral: f64 = text
        .lines()
        .skip(1)
        .take(16)
        .map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap().powi(2)).sum::<f64>() * 0.0625)
        .sum::<f64>()
        * 0.5;
    assert!((integral - value).abs() <= 1e-9 * (1.0 + value), "{integral} vs {value}");
}
