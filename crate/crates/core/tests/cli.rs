mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::data_dir;

fn icl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-ner"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(out: &Path, extra: &[&str]) {
    let cfg = data_dir().join("toy.toml");
    let mut args = vec!["train", "--config", path(&cfg), "--out", path(out)];
    args.extend(extra);
    let o = icl(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_and_stats_exit_codes() {
    let train = data_dir().join("toy_train.jsonl");
    let o = icl(&["validate", path(&train)]);
    assert_eq!(o.status.code(), Some(0));
    let o = icl(&["stats", path(&train)]);
    assert_eq!(o.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(stats.is_object());

    assert_eq!(
        icl(&["validate", "/no/such/file.jsonl"]).status.code(),
        Some(2)
    );
    assert_eq!(icl(&["bogus-subcommand"]).status.code(), Some(2));
    assert_eq!(icl(&["--version"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"id\":\"x\",\"tokens\":[\"a\"],\"entities\":[[0,5,\"PER\"]]}\n",
    )
    .unwrap();
    assert_eq!(icl(&["validate", path(&bad)]).status.code(), Some(1));
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data_dir().join("toy.toml");
    let o = icl(&[
        "run",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
        "--set",
        "no-equals-sign",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_reports_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let cfg = data_dir().join("toy.toml");
    let o = icl(&[
        "run",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
        "--set",
        "seeds=[3, 4]",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["summary"]["n"], 2);
    assert_eq!(report["seeds"], serde_json::json!([3, 4]));
    assert!(text(&o).contains("mean (n=2)"));
}

#[test]
fn sweep_over_k_writes_a_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let cfg = data_dir().join("toy.toml");
    let o = icl(&[
        "sweep",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
        "--axis",
        "k",
        "--values",
        "1,2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap())
            .unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["error"].is_null()));
    assert!(dir.path().join("k=1").join("report.json").exists());
    assert!(dir.path().join("k=2").join("report.json").exists());
    let out = text(&o);
    assert!(
        out.lines().any(|l| l.starts_with("1 ")) && out.lines().any(|l| l.starts_with("2 ")),
        "{out}"
    );

    let o = icl(&[
        "sweep",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
        "--axis",
        "k",
        "--values",
        "1,1",
    ]);
    // duplicate values are a malformed argument
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_over_backends_contrasts_oracle_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let cfg = data_dir().join("toy.toml");
    let o = icl(&[
        "sweep",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
        "--axis",
        "backend",
        "--values",
        "mock-oracle,mock-scripted-empty",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap())
            .unwrap();
    let f1: Vec<f64> = rows
        .iter()
        .map(|r| r["summary"]["mean_f1"].as_f64().unwrap())
        .collect();
    assert_eq!(f1, [1.0, 0.0]);
}

#[test]
fn score_round_trips_run_predictions() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &[]);
    let cfg = data_dir().join("toy.toml");
    let o = icl(&["run", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(o.status.success());
    let gold = data_dir().join("toy_test.jsonl");
    let pred = dir.path().join("predictions.jsonl");
    let scored = dir.path().join("rescored");
    let o = icl(&[
        "score",
        "--gold",
        path(&gold),
        "--pred",
        path(&pred),
        "--out",
        path(&scored),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scored.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(summary["mean_f1"], 1.0);
}
