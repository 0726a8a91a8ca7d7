// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exit codes and argument handling of the command-line driver.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn polyprobe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyprobe"))
        .args(args)
        .current_dir(cwd)
        .env("POLYPROBE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&common::tiny_config()).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn invalid_configs_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let o = polyprobe(&["--config", bad.to_str().unwrap(), "config"], tmp.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    fs::write(&bad, r#"{"prompts": {"n": 0}}"#).unwrap();
    assert_eq!(code(&polyprobe(&["--config", bad.to_str().unwrap(), "config"], tmp.path())), 3);

    let missing = tmp.path().join("missing.json");
    assert_eq!(code(&polyprobe(&["--config", missing.to_str().unwrap(), "config"], tmp.path())), 3);
    assert_eq!(code(&polyprobe(&["frobnicate"], tmp.path())), 3);
    assert_eq!(code(&polyprobe(&["intervene", "everything"], tmp.path())), 3);
}

#[test]
fn config_round_trips_and_seed_changes_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let o = polyprobe(&["--config", &cfg, "config"], tmp.path());
    assert_eq!(code(&o), 0);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let original: serde_json::Value = serde_json::to_value(common::tiny_config()).unwrap();
    assert_eq!(printed, original);
    let o = polyprobe(&["--config", &cfg, "--seed", "5", "config"], tmp.path());
    let reseeded: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_ne!(reseeded, original);
}

#[test]
fn run_directory_conflicts_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let out = tmp.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("notes.txt"), "mine").unwrap();
    let args = ["--config", cfg.as_str(), "--out", out.to_str().unwrap(), "gen-corpus"];
    assert_eq!(code(&polyprobe(&args, tmp.path())), 3);
    assert!(out.join("notes.txt").exists());
    let mut forced = args.to_vec();
    forced.insert(0, "--force");
    assert_eq!(code(&polyprobe(&forced, tmp.path())), 0);
    assert!(out.join("corpus.json").exists());
    assert!(!out.join("notes.txt").exists());
    // Same config again reuses the directory; another seed conflicts.
    assert_eq!(code(&polyprobe(&args, tmp.path())), 0);
    let mut reseeded = args.to_vec();
    reseeded.extend(["--seed", "9"]);
    assert_eq!(code(&polyprobe(&reseeded, tmp.path())), 3);
}

#[test]
fn out_of_order_stages_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let out = tmp.path().join("run");
    let with = |cmd: &str| polyprobe(&["--config", &cfg, "--out", out.to_str().unwrap(), cmd], tmp.path());
    let o = with("train-sae");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-model"));
    assert_eq!(code(&with("train-model")), 0);
    let o = with("analyze");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-sae"));
}
