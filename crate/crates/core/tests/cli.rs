//! Command-line contracts: exit codes, error tags and the files each
//! subcommand leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--toy",
    "--seed",
    "3",
    "--set",
    "loc_epochs=2",
    "--set",
    "loc_samples_per_volume=20",
    "--set",
    "seg_epochs_binary=1",
    "--set",
    "seg_epochs_multiclass=1",
    "--set",
    "seg_slices_per_crop_multiclass=1",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumbarseg"))
        .args(args)
        .env("LUMBARSEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {err}");
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["phantom", "--out", s(dir.path()), "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("phantom") && err.contains("no_such_key"), "{err}");
}

#[test]
fn multiclass_training_needs_init_or_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "phantom",
        "--out",
        s(&d.join("ph")),
        "--train",
        "1",
        "--test",
        "1",
        "--toy",
    ]);
    let manifest = d.join("ph").join("manifest.txt");
    let out = run(&with_tiny(&[
        "segment",
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&d.join("m.ckpt")),
    ]));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: segment train:"), "{err}");
    assert!(!d.join("m.ckpt").exists());
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ph = d.join("ph");
    ok(&[
        "phantom",
        "--out",
        s(&ph),
        "--train",
        "3",
        "--test",
        "2",
        "--toy",
        "--seed",
        "3",
    ]);
    let manifest = ph.join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("train")).count(), 3, "{text}");
    assert_eq!(text.lines().filter(|l| l.contains("test")).count(), 2, "{text}");
    let m = s(&manifest);

    let loc = d.join("loc.ckpt");
    let boxes = d.join("boxes.csv");
    let sens = d.join("sens.csv");
    ok(&with_tiny(&["localize", "train", "--manifest", m, "--out", s(&loc)]));
    ok(&with_tiny(&[
        "localize",
        "predict",
        "--manifest",
        m,
        "--model",
        s(&loc),
        "--out",
        s(&boxes),
    ]));
    let said = ok(&[
        "localize",
        "eval",
        "--manifest",
        m,
        "--boxes",
        s(&boxes),
        "--out",
        s(&sens),
    ]);
    assert!(said.starts_with("mean sensitivity"), "{said}");
    assert_eq!(header(&boxes), "case,x_min,x_max,y_min,y_max,z_min,z_max");
    assert_eq!(header(&sens), "case,sensitivity");
    assert_eq!(fs::read_to_string(&boxes).unwrap().lines().count(), 3);

    let bin = d.join("bin.ckpt");
    let multi = d.join("multi.ckpt");
    let preds = d.join("preds");
    ok(&with_tiny(&["segment", "pretrain", "--manifest", m, "--out", s(&bin)]));
    ok(&with_tiny(&[
        "segment",
        "train",
        "--manifest",
        m,
        "--init",
        s(&bin),
        "--out",
        s(&multi),
    ]));
    assert_eq!(header(&multi.with_extension("loss.csv")), "epoch,loss");
    ok(&with_tiny(&[
        "segment",
        "predict",
        "--manifest",
        m,
        "--model",
        s(&multi),
        "--boxes",
        s(&boxes),
        "--out",
        s(&preds),
    ]));
    let eval = d.join("eval");
    let said = ok(&[
        "eval",
        "--manifest",
        m,
        "--predictions",
        s(&preds),
        "--out",
        s(&eval),
        "--toy",
    ]);
    assert!(said.starts_with("mean lumbar Dice"), "{said}");
    assert_eq!(header(&eval.join("dice_table.csv")), "case,L1,L2,L3,L4,L5,Lumbar");
    let table = fs::read_to_string(eval.join("dice_table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 1 + 2 + 2, "{table}");
    assert!(rows[3].starts_with("mean,") && rows[4].starts_with("std,"));
}

#[test]
fn pipeline_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let said = ok(&with_tiny(&[
        "pipeline",
        "--out",
        s(&out),
        "--set",
        "phantom_train=3",
        "--set",
        "phantom_test=2",
    ]));
    assert!(said.contains("sensitivity") && said.contains("Dice"), "{said}");
    for f in [
        "run_record.txt",
        "phantoms/manifest.txt",
        "localizer.ckpt",
        "boxes.csv",
        "sensitivity.csv",
        "seg_binary.ckpt",
        "seg_multiclass.ckpt",
        "dice.csv",
        "dice_table.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let record = fs::read_to_string(out.join("run_record.txt")).unwrap();
    assert!(record.contains("seed = 3"), "{record}");
}
