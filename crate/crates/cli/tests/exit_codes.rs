// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hdgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdgm")).args(args).output().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

const SIM: &str = r#"
t_len = 40
seed = 3
[layout]
kind = "random"
n = 5
lat = [44.5, 46.5]
lon = [8.5, 11.5]
[params]
beta = [1.0, 0.5]
alpha = 0.6
g = 0.7
theta = 1.0
[skedastic]
kind = "constant"
value = 1.0
"#;

fn simulated(dir: &Path) -> String {
    fs::write(dir.join("sim.toml"), SIM).unwrap();
    fs::write(dir.join("run.toml"), "[model]\nterms = [\"x1\"]\n").unwrap();
    let panel = dir.join("panel.csv");
    let out = hdgm(&["simulate", "--spec", dir.join("sim.toml").to_str().unwrap(), "--out", panel.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    panel.to_string_lossy().into_owned()
}

#[test]
fn missing_input_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[model]\nterms = [\"x1\"]\n").unwrap();
    let cfg = dir.path().join("run.toml");
    let out = hdgm(&["--config", cfg.to_str().unwrap(), "fit", "--panel", "/nonexistent/panel.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let v = error_line(&out);
    assert_eq!(v["exit"], 2);
    assert!(!v["message"].as_str().unwrap().is_empty());
}

#[test]
fn unknown_covariate_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path());
    fs::write(dir.path().join("bad.toml"), "[model]\nterms = [\"nope\"]\n").unwrap();
    let cfg = dir.path().join("bad.toml");
    let out = hdgm(&["--config", cfg.to_str().unwrap(), "fit", "--panel", &panel, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "schema");
}

#[test]
fn stopping_before_convergence_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path());
    let cfg = dir.path().join("run.toml");
    let out_dir = dir.path().join("fit");
    let out = hdgm(&[
        "--config",
        cfg.to_str().unwrap(),
        "fit",
        "--panel",
        &panel,
        "--out",
        out_dir.to_str().unwrap(),
        "--max-iter",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(out_dir.join("fit.json").exists());
}

#[test]
fn newer_artifact_major_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path());
    let cfg = dir.path().join("run.toml");
    let out_dir = dir.path().join("fit");
    let out = hdgm(&["--config", cfg.to_str().unwrap(), "fit", "--panel", &panel, "--out", out_dir.to_str().unwrap()]);
    assert!(matches!(out.status.code(), Some(0) | Some(4)));
    let art = out_dir.join("fit.json");
    let text = fs::read_to_string(&art).unwrap().replace("\"schema_version\": \"1.0\"", "\"schema_version\": \"2.0\"");
    fs::write(&art, text).unwrap();
    let out = hdgm(&["predict", "--fit", art.to_str().unwrap(), "--grid", &panel, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "schema");
}
