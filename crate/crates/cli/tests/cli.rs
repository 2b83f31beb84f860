//! End-to-end checks of the compiled binary: argument parsing, printed
//! summaries, artifact side effects, and the exit-code contract
//! (0 success, 2 config error, 3 runtime error).

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dispatchsim");

fn dispatchsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).expect("config written");
    path.display().to_string()
}

fn run_config(out_dir: &Path) -> String {
    format!(
        r#"
        [experiment]
        preset = "uniform"
        horizon_s = 600
        seed = 3
        out_dir = "{}"
        value_snapshot_interval_s = 300

        [policies.learner.rlw]
        "#,
        out_dir.display()
    )
}

#[test]
fn run_prints_summary_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let config = write_config(tmp.path(), &run_config(&out_dir));

    let out = dispatchsim(&["run", "--config", &config]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("run seed=3"), "unexpected stdout: {text}");
    assert!(text.contains("policy=learner"));
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("series.csv").exists());
    assert!(out_dir.join("value_snapshots.jsonl").exists());
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &run_config(&tmp.path().join("ignored")));
    let moved = tmp.path().join("moved");

    let out = dispatchsim(&[
        "run",
        "--config",
        &config,
        "--seed",
        "41",
        "--out",
        moved.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("run seed=41"));
    assert!(moved.join("report.json").exists());
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn compare_honours_seed_range_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let body = format!(
        r#"
        [experiment]
        preset = "uniform"
        horizon_s = 300
        out_dir = "{}"

        [policies.base.myopic]
        [policies.other.v1d3]

        [compare]
        baseline = "base"
        seeds = [9]
        "#,
        out_dir.display()
    );
    let config = write_config(tmp.path(), &body);

    let out = dispatchsim(&["compare", "--config", &config, "--seeds", "1..3"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("baseline=base"));
    assert!(text.contains("[1, 2]"), "seed range not applied: {text}");
    assert!(out_dir.join("comparison.csv").exists());
    assert!(out_dir.join("improvements.csv").exists());
}

#[test]
fn gen_log_writes_replayable_events() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let config = write_config(tmp.path(), &run_config(&out_dir));

    let out = dispatchsim(&["gen-log", "--config", &config]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let log = out_dir.join("trip_log.jsonl");
    assert!(stdout(&out).contains("wrote"));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().count() > 0, "empty trip log");
}

#[test]
fn heatmap_reads_back_a_previous_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let config = write_config(tmp.path(), &run_config(&out_dir));
    assert!(dispatchsim(&["run", "--config", &config]).status.success());

    let csv_path = tmp.path().join("heatmap.csv");
    let out = dispatchsim(&[
        "heatmap",
        "--run-dir",
        out_dir.to_str().unwrap(),
        "--t",
        "600",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("row,col,value"));
    // 8x8 uniform grid plus the header line.
    assert_eq!(csv.lines().count(), 65);
}

#[test]
fn unparseable_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "[experiment]\nnot_a_field = 1\n");

    let out = dispatchsim(&["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn missing_config_file_exits_2() {
    let out = dispatchsim(&["run", "--config", "/nonexistent/experiment.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cannot read config"));
}

#[test]
fn malformed_seed_range_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &run_config(&tmp.path().join("out")));

    for bad in ["5", "3..3", "a..b"] {
        let out = dispatchsim(&["run", "--config", &config, "--seeds", bad]);
        assert_eq!(out.status.code(), Some(2), "--seeds {bad} should be rejected");
    }
}

#[test]
fn heatmap_for_unknown_policy_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let config = write_config(tmp.path(), &run_config(&out_dir));
    assert!(dispatchsim(&["run", "--config", &config]).status.success());

    let out = dispatchsim(&[
        "heatmap",
        "--run-dir",
        out_dir.to_str().unwrap(),
        "--t",
        "0",
        "--policy",
        "nobody",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("no value snapshot"));
}
