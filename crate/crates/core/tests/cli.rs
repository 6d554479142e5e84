//! The `avseg` binary: JSON on success, JSON error and nonzero exit on failure.

use std::process::Command;

use serde_json::Value;

const TINY: [&str; 8] = [
    "--profile",
    "toy",
    "--set",
    "data.samples_per_class=4",
    "--set",
    "epochs=1",
    "--set",
    "pretrain.epochs=1",
];

fn avseg(args: &[&str], root: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_avseg"))
        .args(args)
        .env("AVSEG_OUTPUT_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn error_json(out: &std::process::Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

#[test]
fn gen_data_train_eval_plot() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-data"];
    args.extend(TINY);
    let out = avseg(&args, root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(root.path().join("data/train").is_dir());
    assert!(v["content_hash"].is_string());

    let mut args = vec!["train", "--set", "mode=avf_only"];
    args.extend(TINY);
    let out = avseg(&args, root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["gt_reads"], 0);
    assert_eq!(v["epochs"], 1);
    let ck = root.path().join("run/checkpoint.json");
    assert!(ck.is_file() && root.path().join("run/config.toml").is_file());

    let ck_arg = ck.to_str().unwrap().to_string();
    let mut args = vec!["eval", "--checkpoint", &ck_arg, "--set", "mode=avf_only"];
    args.extend(TINY);
    let out = avseg(&args, root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((0.0..=1.0).contains(&v["miou"].as_f64().unwrap()));

    // A checkpoint from a different architecture is refused.
    let mut args = vec!["eval", "--checkpoint", &ck_arg, "--set", "encoder.stages=2"];
    args.extend(TINY);
    let out = avseg(&args, root.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "checkpoint_mismatch");

    let mut args = vec!["plot"];
    args.extend(TINY);
    let out = avseg(&args, root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.path().join("run/loss.svg").is_file());
}

#[test]
fn invalid_config_is_reported_as_json() {
    let root = tempfile::tempdir().unwrap();
    let out = avseg(&["train", "--profile", "toy", "--set", "epochs=0"], root.path());
    assert_eq!(out.status.code(), Some(1));
    let v = error_json(&out);
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("epochs"));
}

#[test]
fn usage_errors_are_json_too() {
    let root = tempfile::tempdir().unwrap();
    let out = avseg(&["frobnicate"], root.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["eval", "--checkpoint", "/nonexistent/checkpoint.json"];
    args.extend(TINY);
    let out = avseg(&args, root.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "io");
}
