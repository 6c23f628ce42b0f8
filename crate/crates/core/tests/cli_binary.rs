//! Runs the compiled `tensorpoly` binary and checks exit codes and outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tensorpoly::harness::suite::read_summary;

fn tensorpoly(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tensorpoly")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const TINY: &str = r#"
d_in = 8
d_out = 8
layers = 1
rank = 2
train_tasks = 3
test_tasks = 2
samples_per_task = 16
eval_samples = 16
shots = 8
pretrain_epochs = 3
adapt_epochs = 2
"#;

#[test]
fn params_prints_count_and_exits_zero() {
    let o = tensorpoly(&["params", "--method", "lora", "--d", "512", "--r", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim_end().split('\t').nth(2), Some("4096"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tensorpoly(&["params", "--method", "lora"]).status.code(), Some(1));
    assert_eq!(tensorpoly(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(tensorpoly(&["report", "--run", "/nonexistent/run"]).status.code(), Some(1));
    assert_eq!(tensorpoly(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_and_oracle_pass() {
    let o = tensorpoly(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = tensorpoly(&["oracle", "--instances", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn pretrain_then_adapt_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, TINY).unwrap();
    let pre = tmp.path().join("pre");
    let cfg_s = cfg.to_str().unwrap();
    let o = tensorpoly(&["pretrain", "--config", cfg_s, "--method", "tp1", "--out", pre.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "checkpoint.bin", "metrics.jsonl"] {
        assert!(pre.join(f).is_file(), "{f}");
    }
    let ckpt = pre.join("checkpoint.bin");
    let ad = tmp.path().join("adapt");
    let o = tensorpoly(&[
        "adapt",
        "--config",
        cfg_s,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--mode",
        "z-only",
        "--out",
        ad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.contains("mode z-only trainable 2 ")), "{text}");
    assert!(ad.join("adapted-task0.bin").is_file() && ad.join("adapted-task1.bin").is_file());

    // rerunning into the same directory must not overwrite anything
    let o = tensorpoly(&["pretrain", "--config", cfg_s, "--method", "tp1", "--out", pre.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    // a checkpoint from another generator seed is rejected
    let o = tensorpoly(&["adapt", "--config", cfg_s, "--seed", "7", "--checkpoint", ckpt.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

fn suite_file(dir: &Path, body: &str) -> String {
    let p = dir.join("suite.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn suite_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let base: String = TINY.lines().filter(|l| !l.is_empty()).map(|l| format!("{l}\n")).collect();
    let cfg = suite_file(tmp.path(), &format!("methods = [\"lora\", \"tp1\"]\nmodes = [\"full\", \"z-only\"]\nseeds = [0, 1]\n\n[base]\n{base}"));
    let run = tmp.path().join("run");
    let o = tensorpoly(&["run-suite", "--config", &cfg, "--out", run.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_summary(&run.join("summary.csv")).unwrap();
    // lora has no routing, so its z-only cell is skipped
    assert_eq!(rows.len(), 3);
    assert_eq!(fs::read_dir(run.join("metrics")).unwrap().count(), 6);

    let lora = rows.iter().find(|r| r.method.to_string() == "lora").unwrap();
    let o = tensorpoly(&["params", "--method", "lora", "--d", "8", "--r", "2"]);
    let count: u64 = stdout(&o).trim_end().split('\t').nth(2).unwrap().parse().unwrap();
    assert_eq!(lora.adapt_params_per_layer, count);

    let o = tensorpoly(&["report", "--run", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("tp1"));
}

#[test]
fn numerical_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, format!("{TINY}lr_modules = 1e9\nlr_routing = 1e9\npretrain_epochs = 50\n").replace("pretrain_epochs = 3\n", "")).unwrap();
    let o = tensorpoly(&["pretrain", "--config", cfg.to_str().unwrap(), "--method", "lora", "--out", tmp.path().join("p").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
