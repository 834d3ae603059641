use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bridgelab");

fn bridgelab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn synth(dir: &Path, n: usize) -> String {
    let path = dir.join("data.jsonl").display().to_string();
    assert!(bridgelab(&["synth", "--n", &n.to_string(), "--seed", "5", "--out", &path]).status.success());
    path
}

#[test]
fn split_counts_partition_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 40);
    let ext = dir.path().join("ext.jsonl");
    let abs = dir.path().join("abs.jsonl");
    let out = bridgelab(&[
        "split-ext-abs",
        "--in",
        &data,
        "--out-ext",
        ext.to_str().unwrap(),
        "--out-abs",
        abs.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let counts: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let lines = |p: &Path| std::fs::read_to_string(p).unwrap().lines().count() as u64;
    assert_eq!(counts["extractive"].as_u64().unwrap(), lines(&ext));
    assert_eq!(counts["abstractive"].as_u64().unwrap(), lines(&abs));
    assert_eq!(lines(&ext) + lines(&abs), 40);
}

#[test]
fn bridged_eval_requires_a_bridge_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let report = dir.path().join("r.json");
    let out = bridgelab(&[
        "eval",
        "--dataset",
        &data,
        "--pipeline",
        "bridged",
        "--generator-model",
        "g",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bridge-model"));
}

#[test]
fn missing_fixtures_without_fallback_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[backend]\nfallback = \"none\"\n[gateway]\nmax_retries = 0\n").unwrap();
    let report = dir.path().join("r.json");
    let out = bridgelab(&[
        "--config",
        config.to_str().unwrap(),
        "eval",
        "--dataset",
        &data,
        "--pipeline",
        "naive",
        "--generator-model",
        "g",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["scored"], 0);
    assert_eq!(report["errors"].as_array().unwrap().len(), 3);
}

#[test]
fn malformed_dataset_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.jsonl");
    std::fs::write(&data, "{oops\n").unwrap();
    let out = bridgelab(&[
        "gen-sft",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        "/dev/null",
        "--teacher-model",
        "t",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn lab_verify_passes() {
    let out = bridgelab(&["lab", "verify", "--worlds", "50", "--seed", "1"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(bridgelab(&["lab", "verify", "--max-dim", "0"]).status.code(), Some(1));
}
