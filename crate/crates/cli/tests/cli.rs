use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 4
[train-lite]
n_layers = 4
d_model = 16
n_heads = 2
max_seq = 64
block_len = 65
batch_size = 2
grad_accum_steps = 1
max_steps = 2
earliest_exit = 1
first_half_stride = 1
second_half_stride = 1
[train-rl]
preset = "small"
total_steps = 256
tokens_per_episode = 4
max_context = 32
[eval]
n_samples = 3
max_context = 32
warmup = 0
[fixed-exit-sweep]
n_samples = 3
max_context = 32
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earlyexit"))
        .current_dir(dir)
        .env("EARLYEXIT_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn corpus(dir: &Path) {
    ok(dir, &["synth-corpus", "--out", "corpus", "--files", "30", "--seed", "2"]);
    ok(dir, &["ingest", "--corpus-dir", "corpus", "--extensions", "py"]);
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["ingest", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_path() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let out = run(dir.path(), &["eval", "--checkpoint", "nowhere/lite.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/lite.ckpt"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[ingest]\ncorpus_dirr = \"x\"\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus_dirr"));
    let out = run(dir.path(), &["ingest", "--corpus-dir", ".", "--split-ratios", "0.5,0.1,0.1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--out", "c", "--files", "20"]);
    ok(d, &["ingest", "--corpus-dir", "c", "--seed", "5", "--manifest", "a.json"]);
    ok(d, &["ingest", "--corpus-dir", "c", "--seed", "5", "--manifest", "b.json"]);
    ok(d, &["ingest", "--corpus-dir", "c", "--seed", "6", "--manifest", "c.json"]);
    let read = |n: &str| fs::read_to_string(d.join(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
}

#[test]
fn config_file_values_are_used_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-corpus", "--out", "c", "--files", "20"]);
    fs::write(d.join("cfg.toml"), "[ingest]\ncorpus_dir = \"c\"\nmanifest = \"from_file.json\"\n").unwrap();
    ok(d, &["--config", "cfg.toml", "ingest"]);
    assert!(d.join("from_file.json").exists());
    ok(d, &["--config", "cfg.toml", "ingest", "--manifest", "from_flag.json"]);
    assert!(d.join("from_flag.json").exists());
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    fs::write(d.join("run.toml"), TINY).unwrap();
    ok(d, &["--config", "run.toml", "train-lite"]);
    ok(d, &["--config", "run.toml", "train-lite", "--base", "--out", "artifacts/base.ckpt"]);
    ok(d, &["--config", "run.toml", "train-rl"]);
    ok(d, &["export-policy"]);

    let history = fs::read_to_string(d.join("artifacts/loss_history.csv")).unwrap();
    assert!(history.starts_with("step,aggregated_loss,loss_layer_1"));
    let curve = fs::read_to_string(d.join("artifacts/reward_curve.csv")).unwrap();
    assert!(curve.starts_with("episode,mean_step_reward,moving_average_50"));
    let trace = fs::read_to_string(d.join("artifacts/episode_trace.jsonl")).unwrap();
    let first: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    for k in ["token_idx", "exit_idx", "action", "reward"] {
        assert!(first.get(k).is_some(), "trace record lacks {k}");
    }
    let policy: Value = serde_json::from_slice(&fs::read(d.join("artifacts/policy.json")).unwrap()).unwrap();
    assert_eq!(policy["format"], "earlyexit-policy");
    assert_eq!(policy["input_dim"], 16);

    ok(
        d,
        &[
            "--config", "run.toml", "eval", "--thresholds", "0.6,0.9",
            "--base-checkpoint", "artifacts/base.ckpt", "--svg",
        ],
    );
    let report: Value = serde_json::from_slice(&fs::read(d.join("artifacts/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["base-full", "lite-full", "dynamic@0.6", "dynamic@0.9"]);
    assert!(d.join("artifacts/report.csv").exists() && d.join("artifacts/report.svg").exists());

    let out = ok(d, &["--config", "run.toml", "fixed-exit-sweep"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    // schedule [1,2,3,4]: header plus one row per layer
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(fs::read_to_string(d.join("artifacts/sweep.csv")).unwrap(), csv);
}

#[test]
fn serve_fails_cleanly_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["serve", "--bind", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("artifacts/lite.ckpt"));
}
