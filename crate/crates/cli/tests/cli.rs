use std::fs;
use std::path::Path;
use std::process::Command;

use mixsign_cli::{run_cli, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mixsign").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SPEC: &str =
    r#"{"height": 32, "width": 32, "train_size": 4, "dev_size": 2, "test_size": 2}"#;

fn small_config(data: &Path, task: &str, epochs: usize) -> String {
    serde_json::json!({
        "dataset": data,
        "task": task,
        "seed": 3,
        "model": {
            "stem": {"channels": [4, 8, 8], "strides": [2, 2, 2], "tap_block": 1},
            "frame_size": [32, 32],
            "stages": [{"k_local": 3, "k_temporal": 4}, {"k_local": 2, "k_temporal": 4}],
            "head": {"hidden": 8},
            "decoder_hidden": 8
        },
        "optim": {"epochs": epochs}
    })
    .to_string()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let (code, _, err) = run(&["train", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("missing.json"), "{err}");
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"dataset": "d", "task": "cslr", "bogus": 1}"#).unwrap();
    let (code, _, err) = run(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_exit_with_usage() {
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, _) = run(&["eval", "--checkpoint", "x", "--bogus"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("gen-data"));
}

#[test]
fn task_must_match_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, small_config(dir.path(), "tcp_pretrain", 1)).unwrap();
    let (code, _, err) = run(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("pretrain"), "{err}");
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, small_config(&dir.path().join("nowhere"), "cslr", 1)).unwrap();
    let (code, _, err) = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn gradcheck_prints_table_and_passes() {
    let (code, out, err) = run(&["gradcheck"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.lines().count() > 20);
    for name in [
        "op matmul",
        "lsg_update",
        "tsg_update",
        "hsg_update",
        "ctc_loss",
        "temporal head",
        "translation decoder",
    ] {
        assert!(out.contains(name), "{name} missing from\n{out}");
    }
}

#[test]
fn gen_data_train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let data = dir.path().join("data");
    let (code, out, err) = run(&[
        "gen-data",
        "--config",
        s(&spec),
        "--seed",
        "5",
        "--out",
        s(&data),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("train: 4"), "{out}");

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, small_config(&data, "cslr", 1)).unwrap();
    let run_dir = dir.path().join("run");
    let (code, out, err) = run(&["train", "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("best epoch"), "{out}");
    assert!(run_dir.join("metrics.csv").exists());

    let best = run_dir.join("best");
    let (code, out, err) = run(&["eval", "--checkpoint", s(&best), "--split", "test"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.starts_with("split test"), "{out}");

    let (code, _, err) = run(&["eval", "--checkpoint", s(&best), "--split", "valid"]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("valid"), "{err}");

    let graphs = dir.path().join("graphs");
    let (code, out, err) = run(&[
        "export-graphs",
        "--checkpoint",
        s(&best),
        "--sample",
        "dev_0000",
        "--format",
        "dot",
        "--out",
        s(&graphs),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.lines().count(), 6, "{out}");
    let (code, _, _) = run(&[
        "export-graphs",
        "--checkpoint",
        s(&best),
        "--sample",
        "dev_0000",
        "--format",
        "svg",
        "--out",
        s(&graphs),
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mixsign");
    let status = Command::new(bin).arg("nonsense").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    let status = Command::new(bin)
        .args([
            "train",
            "--config",
            "/definitely/missing.json",
            "--out",
            "/tmp/unused",
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&status.stderr).contains("missing.json"));
}
