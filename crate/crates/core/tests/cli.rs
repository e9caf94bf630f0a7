use std::path::Path;
use std::process::{Command, Output};

use skim::packing::unpack;
use skim::{Bundle, PackedBlob, QuantReport};

fn skim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skim")).args(args).env("SKIM_THREADS", "2").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_fixture(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("fx.skb");
    let out = skim(&["fixture", "--out", s(&path), "--seed", "3", "--rows", "24", "--cols", "40", "--tokens", "16", "--samples", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn plain_three_bit_quantize() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(dir.path());
    let out_path = dir.path().join("q.skq");
    let out = skim(&["quantize", "--in", s(&fx), "--out", s(&out_path), "--bit", "3", "--no-scale", "--no-mixed"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let layer = unpack(&PackedBlob(std::fs::read(&out_path).unwrap())).unwrap();
    assert!(layer.bits.iter().all(|&b| b == 3));
    let report: QuantReport = serde_json::from_str(&std::fs::read_to_string(out_path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report.size.label_bits_per_weight, 3.0);
}

#[test]
fn infeasible_bit_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(dir.path());
    let out = skim(&["quantize", "--in", s(&fx), "--out", s(&dir.path().join("q.skq")), "--bit", "5"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("b_max") || msg.contains("[2, 4]"), "{msg}");
    assert!(!dir.path().join("q.skq").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(skim(&["quantize", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(skim(&[]).status.code(), Some(2));
}

#[test]
fn corrupt_input_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.skq");
    std::fs::write(&bad, b"SKQ1 but not really").unwrap();
    let out = skim(&["dequantize", "--in", s(&bad), "--out", s(&dir.path().join("w.skb"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_check_passes() {
    let out = skim(&["oracle-check", "--seed", "7", "--trials", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("greedy gap") && text.trim_end().ends_with("ok"), "{text}");
}

#[test]
fn staged_workflow_matches_direct_quantize() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(dir.path());
    let gh = dir.path().join("gh.skb");
    let e = dir.path().join("e.skb");
    assert!(skim(&["calibrate", "--in", s(&fx), "--out", s(&gh)]).status.success());
    assert!(skim(&["record-errors", "--in", s(&gh), "--out", s(&e)]).status.success());

    let direct = dir.path().join("direct.skq");
    let staged = dir.path().join("staged.skq");
    let common = ["--bit", "3.25", "--iters", "2", "--trace"];
    let a = skim(&[&["quantize", "--in", s(&fx), "--out", s(&direct)][..], &common].concat());
    let b = skim(&[&["quantize", "--in", s(&gh), "--out", s(&staged), "--errors", s(&e)][..], &common].concat());
    assert!(a.status.success() && b.status.success());
    assert_eq!(std::fs::read(&direct).unwrap(), std::fs::read(&staged).unwrap());
    assert!(String::from_utf8_lossy(&a.stdout).lines().next().unwrap().starts_with("0,"));

    let w = dir.path().join("w.skb");
    assert!(skim(&["dequantize", "--in", s(&staged), "--out", s(&w)]).status.success());
    assert_eq!(Bundle::load(&w).unwrap().require("W").unwrap().shape(), (24, 40));

    let report = staged.with_extension("json");
    let hist = skim(&["report", "--in", s(&report), "--csv", "hist"]);
    let text = String::from_utf8_lossy(&hist.stdout);
    let rows: usize = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(rows, 24);
    assert!(skim(&["report", "--in", s(&report)]).status.success());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"target_bit": 2.5, "scaling": false}"#).unwrap();
    let out_path = dir.path().join("q.skq");
    let out = skim(&["quantize", "--in", s(&fx), "--out", s(&out_path), "--config", s(&cfg), "--bit", "3.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: QuantReport = serde_json::from_str(&std::fs::read_to_string(out_path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(report.target_bit, 3.5);
    assert!(!report.scaling);
    std::fs::write(&cfg, r#"{"target_bit": "three"}"#).unwrap();
    let out = skim(&["quantize", "--in", s(&fx), "--out", s(&out_path), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}
