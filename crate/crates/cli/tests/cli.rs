use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscl_core::{Checkpoint, LabeledDataset, Matrix, ModelParams};

fn sscl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sscl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sscl(args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 12] = [
    "--set", "train.epochs=2",
    "--set", "train.warmup_epochs=1",
    "--set", "train.batch_n=16",
    "--set", "loss.s=4",
    "--set", "loss.k=2",
    "--set", "probe.epochs=3",
];

fn small_data(dir: &Path) -> PathBuf {
    let path = dir.join("d.csv");
    ok(&["gen-data", "--classes", "3", "--dim", "6", "--per-class", "20", "--seed", "2", "--out", s(&path)]);
    path
}

fn pretrain(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["pretrain", "--data", s(data), "--out-dir", s(out)];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_writes_expected_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        ok(&["gen-data", "--kind", "blobs", "--classes", "8", "--dim", "32", "--per-class", "512", "--seed", "1", "--out", s(p)]);
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 4097);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(dir.path().join("a.csv.config.toml").exists());
    let ds = LabeledDataset::read_csv(&a).unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.class_count), (4096, 32, 8));

    let rings = dir.path().join("r.csv");
    ok(&["gen-data", "--kind", "rings", "--classes", "2", "--per-class", "10", "--spread", "0.1", "--out", s(&rings)]);
    assert_eq!(LabeledDataset::read_csv(&rings).unwrap().dim(), 2);
}

#[test]
fn usage_errors_exit_one() {
    let out = sscl(&["gen-data", "--classes", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(sscl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(sscl(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = sscl(&["pretrain", "--set", "loss.mode=fancy", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for m in ["baseline", "synth", "synth-debias", "sampling", "sscl"] {
        assert!(err.contains(m), "{err}");
    }
    assert_eq!(sscl(&["pretrain", "--set", "train.bogus=1"]).status.code(), Some(1));
}

#[test]
fn pretrain_smoke_and_persisted_config_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    pretrain(&data, &run, &["--set", "loss.mode=baseline"]);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,mean_loss,lr\n"));
    assert_eq!(metrics.lines().count(), 3);

    // rerun from the written config into a second directory
    let again = dir.path().join("again");
    ok(&["pretrain", "--config", s(&run.join("config.toml")), "--out-dir", s(&again)]);
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), std::fs::read(again.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(run.join("checkpoint.bin")).unwrap(), std::fs::read(again.join("checkpoint.bin")).unwrap());
}

#[test]
fn zero_epochs_checkpoints_initial_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    pretrain(&data, &run, &["--set", "train.epochs=0"]);
    let ck = Checkpoint::load(run.join("checkpoint.bin")).unwrap();
    let init = ModelParams::init(ck.model.config()).unwrap().into_encoder();
    assert_eq!(ck.model, init);
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), "epoch,mean_loss,lr\n");
}

#[test]
fn checkpoints_every_c_epochs_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    let audit = dir.path().join("audit.jsonl");
    pretrain(&data, &run, &["--set", "train.checkpoint_every=1", "--audit", s(&audit)]);
    assert!(run.join("checkpoint_epoch1.bin").exists());
    assert!(run.join("checkpoint_epoch2.bin").exists());
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&audit)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // 48 training samples, batches of 16: 3 steps x 32 anchors x 2 epochs
    assert_eq!(lines.len(), 3 * 32 * 2);
    assert_eq!(lines[0]["alphas"].as_array().unwrap().len(), 2);
    assert_eq!(lines[0]["hard_indices"].as_array().unwrap().len(), 4);
}

#[test]
fn probe_reports_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    pretrain(&data, &run, &[]);
    let emb = dir.path().join("emb.csv");
    let pca = dir.path().join("pca.csv");
    let stdout = ok(&[
        "probe", "--checkpoint", s(&run.join("checkpoint.bin")), "--data", s(&data), "--embeddings", s(&emb), "--pca", s(&pca),
    ]);
    assert!(stdout.contains("top1"));
    let report = std::fs::read_to_string(run.join("probe_report.csv")).unwrap();
    let row: Vec<f64> = report.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert!(row[1] >= row[0]);
    assert!(run.join("probe_report.csv.config.toml").exists());
    assert!(std::fs::read_to_string(&emb).unwrap().starts_with("label,f1,"));
    assert_eq!(std::fs::read_to_string(&pca).unwrap().lines().next(), Some("label,f1,f2"));
}

#[test]
fn probe_missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = sscl(&["probe", "--checkpoint", s(&dir.path().join("none.bin")), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn untrained_probe_on_unlearnable_labels_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d, c) = (4000, 8, 4);
    let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let data = dir.path().join("noise.csv");
    LabeledDataset::new("noise", x, y, c).unwrap().write_csv(&data).unwrap();
    let run = dir.path().join("run");
    ok(&["pretrain", "--data", s(&data), "--out-dir", s(&run), "--set", "train.epochs=0"]);
    let report = dir.path().join("r.csv");
    ok(&["probe", "--checkpoint", s(&run.join("checkpoint.bin")), "--data", s(&data), "--out", s(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    let top1: f64 = text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((top1 - 0.25).abs() <= 0.05, "top1 {top1}");
}

#[test]
fn compare_single_seed_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("cmp");
    let mut args = vec!["compare", "--data", s(&data), "--seeds", "1", "--out-dir", s(&out), "--parallel"];
    args.extend_from_slice(&QUICK);
    let table = ok(&args);
    assert_eq!(table.lines().count(), 6);
    assert_eq!(table.matches("± 0.00").count(), 10);
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert_eq!(std::fs::read_dir(out.join("metrics")).unwrap().count(), 5);
    assert!(out.join("config.toml").exists());
}

#[test]
fn gradcheck_thresholds() {
    let a = ok(&["gradcheck", "--seed", "3"]);
    assert!(a.contains("PASS"));
    assert_eq!(a, ok(&["gradcheck", "--seed", "3"]));
    assert_ne!(sscl(&["gradcheck", "--threshold", "0"]).status.code(), Some(0));
    assert_eq!(sscl(&["gradcheck", "--eps", "0.5"]).status.code(), Some(1));
}
