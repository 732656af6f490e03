//! Drives the `gwmpc` binary through gen, demos, eval and trace with the oracle encoder.

use std::path::Path;
use std::process::{Command, Output};

fn gwmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwmpc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = gwmpc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn oracle_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    ok(&["gen", "--seed", "3", "--out", p(&suite)]);
    for f in ["vocab.json", "bench.json", "train.json", "test.json"] {
        assert!(suite.join(f).exists(), "missing {f}");
    }
    ok(&["demos", "--suite", p(&suite), "--per-task", "1", "--out", p(&suite.join("demos"))]);

    let report = dir.path().join("gt.csv");
    ok(&["eval", "--suite", p(&suite), "--encoder", "oracle", "--mode", "gt", "--split", "test", "--report", p(&report)]);
    let mut rows = csv::Reader::from_path(&report).unwrap();
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 289);
    let mean = records.last().unwrap();
    assert_eq!(&mean[0], "mean");
    assert_eq!(mean[5].parse::<f64>().unwrap(), 1.0);

    let planner = dir.path().join("planner.txt");
    std::fs::write(&planner, "n=4\nhorizon=6\nkeyframes=2\nreplan_interval=2\n").unwrap();
    let trace = dir.path().join("trace");
    ok(&[
        "trace", "--suite", p(&suite), "--encoder", "oracle", "--mode", "gt", "--planner", p(&planner), "--task", "7", "--out",
        p(&trace),
    ]);
    assert!(trace.join("trace.jsonl").exists());
    assert!(trace.join("frames").join("f000.ppm").exists());
}

#[test]
fn failures_report_json_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = gwmpc(&["eval", "--suite", p(&dir.path().join("absent")), "--encoder", "oracle", "--report", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().is_some_and(|s| !s.is_empty()));

    let out = gwmpc(&["train-wm", "--data", "d", "--encoder", "oracle", "--kind", "pixels", "--out", "m.bin"]);
    assert_eq!(out.status.code(), Some(1));
}
