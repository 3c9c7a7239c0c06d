//! End-to-end runs of the `capture-oneshot` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capture_oneshot::cli::{help_text, subcommands};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_capture-oneshot"));
    cmd.env_remove("CAPTURE_ONESHOT_SEED").env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn binary");
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, seed: &str) -> Output {
    run(bin()
        .args(["synth", "--classes", "2", "--shots", "2", "--negatives", "2", "--seed", seed, "--out"])
        .arg(dir))
}

#[test]
fn synth_is_byte_identical_and_prints_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = synth(&a, "7");
    assert!(stderr(&out).contains("seed: 7"));
    let provenance: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(provenance["classes"].as_array().unwrap().len(), 2);
    synth(&b, "7");
    assert_eq!(files(&a), files(&b));
}

#[test]
fn environment_overrides_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin()
        .env("CAPTURE_ONESHOT_SEED", "99")
        .args(["synth", "--classes", "2", "--shots", "1", "--negatives", "1", "--seed", "7", "--out"])
        .arg(tmp.path().join("c")));
    assert!(stderr(&out).contains("seed: 99"));
    let bad = bin()
        .env("CAPTURE_ONESHOT_SEED", "abc")
        .args(["synth", "--classes", "2", "--out"])
        .arg(tmp.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn validation_errors_exit_1_with_usage() {
    let out = bin().args(["synth", "--out", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    let out = bin().args(["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not found"));
}

#[test]
fn pipeline_through_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3");

    let preview = tmp.path().join("preview");
    let image = data.join("train/class_00/splash_0.png");
    run(bin().args(["preview", "--n", "3", "--side", "64", "--image"]).arg(&image).arg("--out").arg(&preview));
    assert!(preview.join("preview_002.png").is_file());
    let plans: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(preview.join("plans.json")).unwrap()).unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 3);

    let ckpt = tmp.path().join("model.ckpt");
    let trace = tmp.path().join("trace.csv");
    let out = run(bin()
        .args(["train", "--dropout", "fixed", "--steps", "2", "--batch", "1", "--seed", "5", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .arg("--trace")
        .arg(&trace));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 2);
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("step,loss,train_acc\n"));

    let report = tmp.path().join("report.json");
    let confusion = tmp.path().join("confusion.csv");
    run(bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--report")
        .arg(&report)
        .arg("--confusion")
        .arg(&confusion));
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["n_items"], 4);
    let mut reader = csv::Reader::from_path(&confusion).unwrap();
    let total: u64 = reader
        .records()
        .map(|r| r.unwrap().iter().skip(1).map(|v| v.parse::<u64>().unwrap()).sum::<u64>())
        .sum();
    assert_eq!(total, 4);

    let profile = tmp.path().join("neg.csv");
    let out = run(bin()
        .args(["uncertainty", "--split", "neg", "--mc-samples", "3", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&profile));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n"], 2);
    assert_eq!(std::fs::read_to_string(&profile).unwrap().lines().count(), 3);

    let classify = || {
        run(bin()
            .args(["classify", "--mc-samples", "5", "--threshold", "0.12", "--seed", "4", "--ckpt"])
            .arg(&ckpt)
            .arg("--image")
            .arg(&image))
    };
    let first: serde_json::Value = serde_json::from_slice(&classify().stdout).unwrap();
    let second: serde_json::Value = serde_json::from_slice(&classify().stdout).unwrap();
    assert_eq!(first, second);
    assert!(first["rejected"].is_boolean());
    assert_eq!(first["mc_samples"], 5);

    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"subsets":[{"name":"None","techniques":[]}]}"#).unwrap();
    let table = tmp.path().join("ablation.csv");
    run(bin()
        .args(["ablate", "--steps", "1", "--batch", "1", "--data"])
        .arg(&data)
        .arg("--spec")
        .arg(&spec)
        .arg("--out")
        .arg(&table));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("method,accuracy,f1,auc\nNone,"));
}

/// `UPDATE_SNAPSHOTS=1` rewrites the stored help texts.
#[test]
fn help_matches_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let mut names: Vec<Option<String>> = vec![None];
    names.extend(subcommands().into_iter().map(Some));
    for name in names {
        let text = help_text(name.as_deref());
        let path = dir.join(format!("help_{}.txt", name.as_deref().unwrap_or("main")));
        if update {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &text).unwrap();
        }
        let stored = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
        assert_eq!(text, stored, "help of {name:?} changed; rerun with UPDATE_SNAPSHOTS=1");
    }
}
