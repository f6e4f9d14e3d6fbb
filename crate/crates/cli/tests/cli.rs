//! Drives the `tesla` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tesla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tesla")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn log_header(dir: &Path) -> serde_json::Value {
    let log = fs::read_to_string(dir.join("run_log.jsonl")).unwrap();
    serde_json::from_str(log.lines().next().unwrap()).unwrap()
}

/// Small enough to keep the test fast; every other field comes from the preset.
const QUICK: [&str; 6] = ["--set", "trajectories=2", "--set", "iterations=4", "--set", "eval.steps=10"];

#[test]
fn blobs_preset_distills_byte_identically_twice() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let mut args = vec!["distill", "--preset", "blobs-ipc1", "--seed", "7", "--out", dir.to_str().unwrap()];
        args.extend(QUICK);
        let out = tesla(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(dir);
    }
    for file in ["synthetic.tsyn", "run_log.jsonl", "config.json"] {
        assert_eq!(fs::read(outputs[0].join(file)).unwrap(), fs::read(outputs[1].join(file)).unwrap(), "{file}");
    }
    assert_eq!(log_header(&outputs[0])["config"]["distill"]["seed"], 7);
}

#[test]
fn rerunning_from_the_logged_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let out = tesla(&["distill", "--preset", "tiny-mlp", "--set", "iterations=6", "--out", first.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let again = tmp.path().join("again");
    let log = first.join("run_log.jsonl");
    let out = tesla(&["distill", "--config", log.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(first.join("synthetic.tsyn")).unwrap(), fs::read(again.join("synthetic.tsyn")).unwrap());
    assert_eq!(fs::read(first.join("run_log.jsonl")).unwrap(), fs::read(again.join("run_log.jsonl")).unwrap());
}

#[test]
fn set_overrides_preset_matching_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    let out = tesla(&[
        "distill", "--preset", "tiny-mlp", "--set", "matching_steps=100", "--set", "iterations=1", "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(log_header(&dir)["config"]["distill"]["matching_steps"], 100);
    let config: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["distill"]["matching_steps"], 100);
}

#[test]
fn bench_sweep_emits_one_row_per_mode_and_length() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tesla(&["bench", "--preset", "tiny-mlp", "--set", "t_sweep=2,8,32", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "{csv}");
    let tesla_nodes: Vec<&str> = rows.iter().filter(|r| r.starts_with("tesla,")).map(|r| r.split(',').nth(3).unwrap()).collect();
    assert!(tesla_nodes.windows(2).all(|w| w[0] == w[1]), "{csv}");
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        vec!["distill", "--preset", "tiny-mlp", "--set", "no_such_key=1"],
        vec!["distill", "--preset", "tiny-mlp", "--set", "distill.no_such_key=1"],
        vec!["distill", "--preset", "tiny-mlp", "--set", "seed=3"],
        vec!["distill", "--preset", "missing"],
        vec!["distill"],
        vec!["distill", "--bogus-flag"],
        vec!["frobnicate"],
    ] {
        let out = tesla(&args);
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(code(&tesla(&["--help"])), 0);
}

#[test]
fn full_scale_presets_are_labelled_and_refuse_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tesla(&["train-teachers", "--preset", "imagenet-ipc1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not desk-runnable"), "{err}");
}

#[test]
fn frozen_teachers_abort_as_degenerate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tesla(&["distill", "--preset", "tiny-mlp", "--set", "teacher.lr=0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_or_corrupt_files_are_runtime_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tesla(&["eval", "--preset", "tiny-mlp", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let bad = tmp.path().join("bad.tsyn");
    fs::write(&bad, b"TESLASYN\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(code(&tesla(&["inspect", bad.to_str().unwrap()])), 2);
}

#[test]
fn teachers_eval_and_inspect_work_together() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    assert_eq!(code(&tesla(&["train-teachers", "--preset", "tiny-mlp", "--out", dir])), 0);
    let store = tmp.path().join("store");
    let out = tesla(&["inspect", store.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let first = manifest["files"][0].as_str().unwrap();
    let out = tesla(&["inspect", store.join(first).to_str().unwrap()]);
    let meta: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(meta["epochs"], 6);

    assert_eq!(code(&tesla(&["distill", "--preset", "tiny-mlp", "--set", "iterations=3", "--out", dir])), 0);
    let out = tesla(&["eval", "--preset", "tiny-mlp", "--set", "eval.steps=20", "--cross-arch", "--out", dir]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let reports: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("eval.json")).unwrap()).unwrap();
    assert!(reports.as_array().unwrap().len() >= 2);
    let out = tesla(&["inspect", tmp.path().join("synthetic.tsyn").to_str().unwrap()]);
    let meta: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(meta["ipc"], 2);
}
