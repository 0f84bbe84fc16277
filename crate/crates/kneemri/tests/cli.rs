use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kneemri::config::RunConfig;
use tempfile::tempdir;

fn kneemri(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kneemri"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = kneemri(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

// Shrinks a desk config so the commands finish quickly.
fn shrink(path: &Path) {
    let mut config = RunConfig::load(path).unwrap();
    config.model.input_size = 16;
    config.model.stage_channels = vec![8];
    config.model.stage_blocks = 1;
    config.augmentation.crop_size = 10;
    config.save(path).unwrap();
}

#[test]
fn commands_chain_from_synthesis_to_export() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--cases", "8", "--seed", "5", "--out", "data", "--size", "16"]);
    assert!(d.join("data/valid/coronal/0007.npy").is_file());

    ok(d, &[
        "init-config", "--id", "c42", "--task", "abnormal", "--plane", "coronal", "--data", "data",
        "--out-dir", "run", "--epochs", "1", "--seed", "3", "--p", "0.5", "--write", "c42.json",
    ]);
    shrink(&d.join("c42.json"));
    let config = RunConfig::load(&d.join("c42.json")).unwrap();
    assert_eq!((config.epochs, config.seed, config.augmentation.p), (1, 3, 0.5));

    let trained = ok(d, &["train", "--config", "c42.json"]);
    assert!(String::from_utf8_lossy(&trained.stderr).contains("abnormal coronal: AUC"));
    for file in ["model.ckpt", "predictions.csv", "metrics.json"] {
        assert!(d.join("run").join(file).is_file(), "{file}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/metrics.json")).unwrap()).unwrap();
    for key in ["task", "plane", "auc", "epochs", "best_epoch"] {
        assert!(!metrics[0][key].is_null(), "{key}");
    }

    let eval = ok(d, &["eval", "--checkpoint", "run/model.ckpt", "--split", "valid", "--predictions", "p.csv"]);
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["split"], "valid");
    assert_eq!(report["tasks"][0]["task"], "abnormal");
    assert_eq!(report["tasks"][0]["planes"]["coronal"], metrics[0]["auc"]);
    ok(d, &["eval", "--checkpoint", "run/model.ckpt", "--out", "eval.json"]);
    assert_eq!(fs::read(d.join("eval.json")).unwrap(), eval.stdout);

    ok(d, &["grid-search", "--config", "c42.json", "--out", "grid/report.json"]);
    let grid: serde_json::Value = serde_json::from_slice(&fs::read(d.join("grid/report.json")).unwrap()).unwrap();
    assert_eq!(grid["cells"][0]["entries"].as_array().unwrap().len(), 21);
    assert!(fs::read_to_string(d.join("grid/report.txt")).unwrap().contains("Percentage of images augmented"));

    ok(d, &["export-explorer", "--data", "data", "--out", "bundle", "--predictions", "p.csv"]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("bundle/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cases"].as_array().unwrap().len(), 8);
    assert!(d.join("bundle/cases/0000/axial/0.png").is_file());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let missing = kneemri(d, &["train", "--config", "nope.json"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    assert!(!kneemri(d, &["synth", "--cases", "2", "--out", "x"]).status.success());
    assert!(!kneemri(d, &["eval", "--split", "valid"]).status.success());
    assert!(!kneemri(d, &["eval", "--checkpoint", "a", "--split", "test"]).status.success());
    assert!(!kneemri(d, &["init-config", "--id", "c45", "--data", "d", "--out-dir", "o", "--write", "c.json"])
        .status
        .success());
    assert!(!kneemri(d, &["eval", "--combine", "a", "b"]).status.success());
}
