use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hiergen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiergen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hiergen(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn trained_run() -> tempfile::TempDir {
    let run = tempfile::tempdir().unwrap();
    ok(&["train", "--preset", "toy", "--run", run.path().to_str().unwrap(), "--epochs", "1"]);
    run
}

#[test]
fn make_shapeworld_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["make-shapeworld", "--count", "10", "--seed", "0", "--out", d.path().to_str().unwrap(), "--image-size", "16"]);
    }
    let fa = files(a.path());
    assert_eq!(fa.keys().filter(|k| k.ends_with(".json")).count(), 10);
    assert_eq!(fa.keys().filter(|k| k.ends_with(".png")).count(), 10);
    assert_eq!(fa, files(b.path()));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(hiergen(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hiergen(&["generate", "--checkpoint", ".", "--text", "a red circle", "--out", "x"]).status.code(), Some(2));
    assert_eq!(hiergen(&["sample", "--checkpoint", ".", "--text", "x", "--seed", "1", "--bogus"]).status.code(), Some(2));
    assert_eq!(hiergen(&["train", "--run", "r", "--stage", "everything"]).status.code(), Some(2));
    assert!(hiergen(&["--help"]).status.success());
}

#[test]
fn runtime_failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = hiergen(&["sample", "--checkpoint", dir.path().to_str().unwrap(), "--text", "a red circle", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = hiergen(&["train", "--preset", "nonsense", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_sample_generate_eval_round_trip() {
    let run = trained_run();
    let r = run.path().to_str().unwrap();
    for f in ["box.ckpt", "extractor.ckpt", "shape.ckpt", "image.ckpt", "config.toml", "box.history.jsonl"] {
        assert!(run.path().join(f).exists(), "{f}");
    }

    let text = "a red circle left of a blue square";
    let a = ok(&["sample", "--checkpoint", r, "--text", text, "--seed", "3", "--count", "2"]);
    assert_eq!(a, ok(&["sample", "--checkpoint", r, "--text", text, "--seed", "3", "--count", "2"]));
    let lines: Vec<Value> = a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["seed"], 4);

    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    for o in [&out1, &out2] {
        ok(&["generate", "--checkpoint", r, "--text", text, "--seed", "3", "--out", o.path().to_str().unwrap()]);
    }
    let f1 = files(out1.path());
    assert_eq!(f1.keys().cloned().collect::<Vec<_>>(), ["image.png", "layout.json", "masks.json"]);
    assert_eq!(f1, files(out2.path()));

    // the sampled layout matches what generate used for the same seed
    let layout: Value = serde_json::from_slice(&f1["layout.json"]).unwrap();
    assert_eq!(layout, lines[0]["layout"]);
    let masks: Vec<Value> = serde_json::from_slice(&f1["masks.json"]).unwrap();
    assert_eq!(masks.len(), layout["boxes"].as_array().unwrap().len());

    // a supplied layout passes through
    let edited = out1.path().join("edited.json");
    let supplied = serde_json::json!({
        "classes": lines[0]["layout"]["classes"],
        "boxes": [{"x": 0.25, "y": 0.25, "w": 0.5, "h": 0.5, "label": 1}],
    });
    fs::write(&edited, supplied.to_string()).unwrap();
    let out3 = tempfile::tempdir().unwrap();
    ok(&["generate", "--checkpoint", r, "--layout", edited.to_str().unwrap(), "--seed", "1", "--out", out3.path().to_str().unwrap()]);
    let back: Value = serde_json::from_slice(&fs::read(out3.path().join("layout.json")).unwrap()).unwrap();
    assert_eq!(back, supplied);

    let report: Value = serde_json::from_str(&ok(&[
        "eval", "--stage", "box", "--checkpoint", run.path().join("box.ckpt").to_str().unwrap(),
        "--preset", "toy", "--scenes", "8", "--samples", "20",
    ]))
    .unwrap();
    assert_eq!(report["stage"], "box");
    assert!(report["metrics"]["layout_nll_per_object"]["value"].is_number());

    for stage in ["shape", "image", "extractor"] {
        let path = run.path().join(format!("{stage}.ckpt"));
        let report: Value = serde_json::from_str(&ok(&[
            "eval", "--stage", stage, "--checkpoint", path.to_str().unwrap(), "--preset", "toy", "--scenes", "8",
        ]))
        .unwrap();
        assert_eq!(report["stage"], stage);
        assert!(!report["metrics"].as_object().unwrap().is_empty());
    }
}

#[test]
fn resume_continues_the_run() {
    let run = trained_run();
    let r = run.path().to_str().unwrap();
    let out = ok(&["train", "--preset", "toy", "--run", r, "--stage", "box", "--resume", "--epochs", "2"]);
    let logs: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0]["log"]["epoch"], 2);
    let history = fs::read_to_string(run.path().join("box.history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn trains_from_a_dataset_directory() {
    let data = tempfile::tempdir().unwrap();
    ok(&["make-shapeworld", "--count", "24", "--seed", "1", "--out", data.path().to_str().unwrap(), "--image-size", "16"]);
    let run = tempfile::tempdir().unwrap();
    ok(&[
        "train", "--preset", "toy", "--run", run.path().to_str().unwrap(), "--stage", "box",
        "--epochs", "1", "--data", data.path().to_str().unwrap(),
    ]);
    assert!(run.path().join("box.ckpt").exists());
}
