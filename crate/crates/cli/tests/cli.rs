use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mscada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscada"))
        .args(args)
        .env("MSCADA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_GEN: &str = r#"{"height": 16, "width": 16, "source_samples": 6, "target_train_samples": 4, "target_test_samples": 3}"#;

const TINY_TRAIN: &str = r#"{
  "iterations": 3,
  "batch_size": 2,
  "eval_every": 2,
  "expert_channels": 4,
  "backbone_channels": 4,
  "backbone_depth": 2,
  "spatial_channels": 4,
  "head_pool": 2,
  "k_spatial": 4,
  "k_feature": 2,
  "samples": {"height": 16, "width": 16, "source_samples": 6, "target_train_samples": 4, "target_test_samples": 3}
}"#;

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (gen_cfg, train_cfg) = (dir.path().join("gen.json"), dir.path().join("c.json"));
    fs::write(&gen_cfg, TINY_GEN).unwrap();
    fs::write(&train_cfg, TINY_TRAIN).unwrap();
    let data = dir.path().join("d");
    let out = mscada(&["gen-data", "--scenario", "equality2", "--out", path(&data), "--seed", "0", "--config", path(&gen_cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = dir.path().join("run");
    let out = mscada(&["train", "--data", path(&data), "--config", path(&train_cfg), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,loss_sup,loss_ssl,loss_sslM,mIoU,mF1"));
    let iters: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["2", "3"]);
    assert!(run.join("config.json").exists() && run.join("checkpoint.msct").exists());

    let out = mscada(&["eval", "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["iteration"], 3);
    let final_row = csv.lines().last().unwrap();
    let miou: f64 = final_row.split(',').nth(4).unwrap().parse().unwrap();
    assert!((report["miou"].as_f64().unwrap() - miou).abs() < 1e-9);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = mscada(&["train", "--scenario", "equality2", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"iterations\": 3,\n  \"batch_size\": ,\n}\n").unwrap();
    let out = mscada(&["train", "--scenario", "equality2", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");
}

#[test]
fn unknown_field_and_bad_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"iterationz": 3}"#).unwrap();
    let out = mscada(&["train", "--scenario", "equality2", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterationz"));

    let out = mscada(&["train", "--scenario", "equality2", "--ablation", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    let out = mscada(&["train", "--scenario", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = mscada(&["gradcheck", "--seeds", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("10 of 10 checks"), "{text}");
}

#[test]
fn mix_sweep_covers_default_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let out = mscada(&["sweep", "--grid", "mix", "--scenario", "equality2", "--config", path(&cfg), "--iters", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class_ratio,region_ratio,mIoU,mF1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().any(|r| r.starts_with("0.5,0.4,")), "{text}");
}
