//! Runs the `grqo` binary end to end on a tiny corpus.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grqo::trainer::Mode;

fn grqo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grqo")).args(args).env_remove("GRQO_NUM_WORKERS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = grqo(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a tiny dataset and returns its directory.
fn gen_data(root: &Path) -> PathBuf {
    let spec = root.join("spec.json");
    let small = grqo::synthdata::DatasetSpec { train_count: 8, ..common::small_spec() };
    std::fs::write(&spec, serde_json::to_string(&small).unwrap()).unwrap();
    let data = root.join("data");
    let out = ok(&["gen-data", "--out", s(&data), "--seed", "3", "--spec", s(&spec)]);
    assert!(out.starts_with("wrote "));
    data
}

fn write_config(root: &Path) -> PathBuf {
    let path = root.join("config.json");
    std::fs::write(&path, serde_json::to_string(&common::small_config(Mode::Sft)).unwrap()).unwrap();
    path
}

#[test]
fn gen_data_train_eval_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    let config = write_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--mode", "sft", "--config", s(&config), "--out", s(&run)]);
    for f in ["metrics.csv", "config.json", "run_manifest.json", "last.ckpt", "best.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("last.ckpt");
    let reports: Vec<serde_json::Value> = ["1", "64"]
        .iter()
        .map(|p| {
            let line = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "ood", "--prompts-per-class", p, "--seed", "2"]);
            assert_eq!(line.trim().lines().count(), 1);
            serde_json::from_str(line.trim()).unwrap()
        })
        .collect();
    for field in ["run_id", "split", "seed", "num_images"] {
        assert_eq!(reports[0][field], reports[1][field], "{field}");
    }
    assert_eq!(reports[0]["prompts_per_class"], 1);
    assert_eq!(reports[1]["prompts_per_class"], 64);
    assert_eq!(reports[0]["split"], "val_ood");

    let svg = tmp.path().join("plots").join("curves.svg");
    ok(&["plot", "--runs", s(&run), s(&run), "--out", s(&svg)]);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let csv = tmp.path().join("curves.csv");
    ok(&["plot", "--runs", s(&run), "--out", s(&csv)]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn ablate_component_produces_four_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--axis", "component", "--data", s(&data), "--out", s(&out)]);
    let mut runs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    runs.sort();
    assert_eq!(runs, ["grqo", "kl-only", "reward-only", "sft"]);
    for r in &runs {
        assert!(out.join(r).join("metrics.csv").exists());
        assert!(out.join(r).join("run_manifest.json").exists());
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.lines().skip(1).all(|l| l.starts_with("component,")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| {
        let out = grqo(args);
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        assert!(stderr.trim().lines().count() <= 1, "multi-line diagnostic: {stderr}");
        out.status.code().unwrap()
    };
    assert_eq!(code(&["train", "--mode", "sft"]), 2);
    assert_eq!(code(&["eval", "--split", "sideways"]), 2);

    let missing = tmp.path().join("missing");
    let config = write_config(tmp.path());
    assert_eq!(code(&["train", "--data", s(&missing), "--mode", "sft", "--config", s(&config), "--out", s(&tmp.path().join("r"))]), 3);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"lr": -1.0}"#).unwrap();
    assert_eq!(code(&["train", "--data", s(&missing), "--mode", "grqo", "--config", s(&bad), "--out", s(&tmp.path().join("r"))]), 3);

    let data = gen_data(tmp.path());
    let corrupt = tmp.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--ckpt", s(&corrupt), "--data", s(&data), "--split", "id"]), 4);
}
