use std::process::Command;

fn fasw(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fasw"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

#[test]
fn no_arguments_prints_usage() {
    let out = fasw(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = fasw(&["evaluate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = fasw(&[
        "pretrain-source",
        "--train-manifest",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json error record");
    let record: serde_json::Value = serde_json::from_str(line).unwrap();
    assert!(record["error"]["kind"].is_string());
    assert!(record["error"]["message"].as_str().unwrap().contains("nope.csv"));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fasw(&[
        "generate-synthetic",
        "--set",
        "model.nonsense=3",
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_directories_are_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::write(data.join("keep.txt"), "x").unwrap();
    let out = fasw(&[
        "generate-synthetic",
        "--set",
        "synth.A.n_live=4",
        "--set",
        "synth.A.n_spoof=4",
        "--set",
        "synth.B.n_live=4",
        "--set",
        "synth.B.n_spoof=3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(data.join("keep.txt")).unwrap(), "x");
}
