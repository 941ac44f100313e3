use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use transevolve::harness::train::{RunConfig, TrainConfig};
use transevolve::model::{Architecture, FfVariant, ModelConfig};

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transevolve"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_run(dir: &Path) -> std::path::PathBuf {
    let mut model = ModelConfig::tiny(Architecture::EncoderDecoder, FfVariant::Random);
    model.vocab_size = 9;
    let train = TrainConfig {
        lr_max: 1.0,
        warmup_steps: 4,
        batch_size: 2,
        total_steps: 3,
        label_smoothing: 0.1,
        adam_beta1: 0.9,
        adam_beta2: 0.98,
        adam_eps: 1e-9,
        seed: 0,
        eval_every: 0,
        checkpoint_every: 0,
        task_min_len: 1,
        task_max_len: 4,
        listops_depth: 3,
        eval_samples: 4,
        decode_samples: 2,
        target_accuracy: None,
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string(&RunConfig { model, train }).unwrap()).unwrap();
    path
}

#[test]
fn count_params_prints_total() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let o = cli(&["count-params", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l.starts_with("total")));
}

#[test]
fn train_then_decode_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let o = cli(&["train", "--config", cfg.to_str().unwrap(), "--task", "copy", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss,lr,accuracy"));
    assert_eq!(metrics.lines().count(), 4);

    let o = cli(&["decode", "--checkpoint", "out/checkpoint.bin", "--input", "3,4,5"], dir.path());
    assert!(o.status.success());
    let o = cli(&["eval", "--checkpoint", "out/checkpoint.bin", "--task", "reverse"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"accuracy\""));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["count-params", "--config", "missing.json"], dir.path());
    assert!(!o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stderr).trim().lines().count(), 1);

    let cfg = tiny_run(dir.path());
    let o = cli(&["train", "--config", cfg.to_str().unwrap(), "--task", "listops", "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("encoder-only"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let o = cli(
        &["bench", "--config", cfg.to_str().unwrap(), "--lengths", "4,8", "--out", "costs.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("costs.csv")).unwrap().lines().count(), 3);
}

#[test]
fn single_suite_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["verify", "--suite", "params"], dir.path());
    assert!(o.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["suite"], "params");
}
