use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thrustwalk")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn validate_accepts_defaults_and_reports_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write_config(dir.path(), "ok.toml", "");
    let out = run(&["validate", "--config", &ok]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("1200 control ticks"));

    let bad = write_config(dir.path(), "bad.toml", "[erg]\nalpha_r = 5.0\nalpha_x = 1.0\n");
    let out = run(&["validate", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha_x"));

    let typed = write_config(dir.path(), "typed.toml", "[gains]\ncom_kp = [1.0, \"x\", 1.0]\n");
    let out = run(&["validate", "--config", &typed]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gains.com_kp"), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = dir.path().join("nope.toml");
    assert_eq!(run(&["validate", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let out_dir = dir.path().join("run");
    let out = run(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--duration", "0.5", "--seed", "3", "--emit-svg"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 50);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["termination"]["status"], "completed");
    assert_eq!(summary["samples"], 50);
    let frames = std::fs::read_to_string(out_dir.join("frames.svg")).unwrap();
    assert_eq!(frames.matches("class=\"keyframe\"").count(), 2);
    assert!(out_dir.join("timeseries.svg").exists());
}

#[test]
fn failure_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let fall = write_config(dir.path(), "fall.toml", "[sim]\nfall_height = 0.7\nduration = 0.2\n");
    assert_eq!(run(&["simulate", "--config", &fall, "--out", out_dir.to_str().unwrap()]).status.code(), Some(4));
    let blow = write_config(dir.path(), "blow.toml", "[sim]\nblowup = 0.1\nduration = 0.2\n");
    assert_eq!(run(&["simulate", "--config", &blow, "--out", out_dir.to_str().unwrap()]).status.code(), Some(3));
    let cfg = write_config(dir.path(), "c.toml", "");
    assert_eq!(run(&["simulate", "--config", &cfg, "--duration", "-1"]).status.code(), Some(2));
}

#[test]
fn sweep_prints_one_summary_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[sim]\nduration = 0.1\n");
    let out = run(&["sweep", "--config", &cfg, "--param", "gains.com_kd.2=20:40:3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let pts: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let pts = pts.as_array().unwrap();
    assert_eq!(pts.len(), 3);
    assert_eq!(pts[2]["value"], 40.0);
    assert_eq!(run(&["sweep", "--config", &cfg, "--param", "gains.com_kd.2=20:40"]).status.code(), Some(2));
}
