//! The command-line binary: exit codes, JSON logs, config precedence and the
//! gen-data → preprocess → train → eval → heatmap pipeline.

use std::path::Path;
use std::process::{Command, Output};

const TOY_CONFIG: &str = "\
# toy-sized model
timesteps = 3
embed_dim = 2
encoder_hidden = 2
feature_channels = 2
key_dim = 2
recon_hidden = 2
recon_encoder_channels = 2,2
epochs = 7   # overridden on the command line
";

fn acfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acfnet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_lines(o: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&o.stderr)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not a JSON log line `{l}`: {e}")))
        .collect()
}

/// Raw cohort, preprocessed directory and toy config inside `root`.
fn prepare(root: &Path) {
    let raw = root.join("raw");
    let pp = root.join("pp");
    let o = acfnet(&["gen-data", "--out-dir", p(&raw), "--n", "12", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_lines(&o)[0]["event"], "gen-data");
    let o = acfnet(&[
        "preprocess", "--raw-dir", p(&raw), "--out-dir", p(&pp), "--n-slices", "8", "--target", "16", "--split-sizes", "6,3,3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_lines(&o)[0]["train"], 6);
    std::fs::write(root.join("toy.cfg"), TOY_CONFIG).unwrap();
}

fn train(root: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = root.join("toy.cfg");
    let pp = root.join("pp");
    let out = root.join(out);
    let mut args = vec!["train", "--config", p(&cfg), "--data-dir", p(&pp), "--out-dir", p(&out)];
    args.extend_from_slice(extra);
    acfnet(&args)
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(code(&acfnet(&[])), 1);
    assert_eq!(code(&acfnet(&["no-such-command"])), 1);
    assert_eq!(code(&acfnet(&["gradcheck", "--seed", "x"])), 1);
    let o = acfnet(&["train", "--set", "no_such_key=1", "--data-dir", "/nonexistent"]);
    assert_eq!(code(&o), 1);
    assert_eq!(json_lines(&o)[0]["exit_code"], 1);
    assert_eq!(code(&acfnet(&["--help"])), 0);
}

#[test]
fn missing_files_exit_with_3() {
    let o = acfnet(&["eval", "--checkpoint", "/nonexistent/ckpt", "--data-dir", "/nonexistent"]);
    assert_eq!(code(&o), 3);
    let log = &json_lines(&o)[0];
    assert_eq!(log["event"], "error");
    assert_eq!(log["exit_code"], 3);
    assert_eq!(code(&acfnet(&["param-count", "--config", "/nonexistent.cfg"])), 3);
}

#[test]
fn gradcheck_and_param_count_succeed() {
    let o = acfnet(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failed"));
    let o = acfnet(&["param-count", "--json"]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["published_claim_pct"], 41.0);
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);

    let o = train(root, "run", &["--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let logs = json_lines(&o);
    assert_eq!(logs.iter().filter(|l| l["event"] == "epoch").count(), 2, "flag overrides config epochs");
    let saved = std::fs::read_to_string(root.join("run/config.txt")).unwrap();
    assert!(saved.contains("epochs = 2") && saved.contains("timesteps = 3"));
    let metrics = std::fs::read_to_string(root.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let ckpt = root.join("run/checkpoint.ckpt");
    let pp = root.join("pp");
    let o = acfnet(&["eval", "--checkpoint", p(&ckpt), "--data-dir", p(&pp), "--split", "val"]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["recurrence"]["n"], 3);
    assert!(root.join("run/eval_val.json").exists());

    let hm = root.join("heatmap");
    let o = acfnet(&["heatmap", "--checkpoint", p(&ckpt), "--data-dir", p(&pp), "--out-dir", p(&hm)]);
    assert_eq!(code(&o), 0);
    let probs = std::fs::read_to_string(hm.join("probabilities.csv")).unwrap();
    assert_eq!(probs.lines().count(), 1 + 3);
    assert!(std::fs::read_to_string(hm.join("recurrence_heatmap.pgm")).unwrap().starts_with("P2\n12 3\n255\n"));

    let o = acfnet(&["eval", "--checkpoint", p(&ckpt), "--data-dir", p(&pp), "--split", "holdout"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root);
    assert_eq!(code(&train(root, "whole", &["--epochs", "3"])), 0);
    assert_eq!(code(&train(root, "split", &["--epochs", "3", "--max-epochs-this-run", "1"])), 0);
    assert_eq!(std::fs::read_to_string(root.join("split/metrics.jsonl")).unwrap().lines().count(), 1);
    assert_eq!(code(&train(root, "split", &["--epochs", "3", "--resume"])), 0);
    for f in ["metrics.jsonl", "checkpoint.ckpt"] {
        assert_eq!(std::fs::read(root.join("whole").join(f)).unwrap(), std::fs::read(root.join("split").join(f)).unwrap(), "{f}");
    }
    // a different model cannot resume this checkpoint
    assert_eq!(code(&train(root, "split", &["--epochs", "4", "--resume", "--set", "timesteps=4"])), 1);
}

#[test]
fn divergence_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let o = train(dir.path(), "run", &["--epochs", "1", "--learning-rate", "1e300"]);
    assert_eq!(code(&o), 2);
    assert_eq!(json_lines(&o).last().unwrap()["exit_code"], 2);
}
