//! The `hierseg` binary driven end to end on a synthetic dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hierseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierseg"))
        .args(args)
        .env_remove("HIERSEG_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hierseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hierseg(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes and prepares a small dataset under `root`.
fn prepared(root: &Path) -> std::path::PathBuf {
    let raw = root.join("raw");
    let data = root.join("data");
    ok(&["synth", "--out", s(&raw), "--images", "10", "--seed", "3"]);
    ok(&[
        "prepare",
        "--annotations",
        s(&raw.join("annotations.json")),
        "--images",
        s(&raw.join("images")),
        "--out",
        s(&data),
        "--folds",
        "3",
        "--holdout",
        "0.2",
        "--priority",
        "Part1,Part2,Part3",
    ]);
    data
}

fn train_args<'a>(data: &'a str, run: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--data", data, "--out", run, "--folds", "1", "--epochs", "1", "--batch-size", "4", "--lr", "0.005",
        "--no-augment",
    ]
}

#[test]
fn pipeline_runs_from_synthesis_to_overlays() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepared(tmp.path());
    for file in ["class_map.csv", "class_tree.json", "folds.csv", "weights.json"] {
        assert!(data.join(file).exists(), "missing {file}");
    }

    let run = tmp.path().join("run");
    let stdout = ok(&train_args(s(&data), s(&run)));
    assert!(stdout.contains("fold 0: 1 epochs"), "{stdout}");
    let checkpoint = run.join("fold0").join("best.json");
    assert!(checkpoint.exists());
    assert!(run.join("val_summary.csv").exists());

    // Rerunning with the same settings resumes; a different configuration is refused.
    ok(&train_args(s(&data), s(&run)));
    let mut changed = train_args(s(&data), s(&run));
    changed.extend(["--seed", "9"]);
    assert_eq!(code(&changed), 2);

    let eval = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&checkpoint), "--data", s(&data), "--out", s(&eval)]);
    assert!(eval.join("test_summary.csv").exists());
    assert!(eval.join("test_records.csv").exists());
    ok(&[
        "eval", "--checkpoint", s(&checkpoint), "--data", s(&data), "--split", "val", "--fold", "1", "--out", s(&eval),
    ]);
    assert!(eval.join("fold1_summary.csv").exists());

    // A flat background image passes through with its size intact.
    let blank = tmp.path().join("blank");
    fs::create_dir_all(&blank).unwrap();
    image::GrayImage::from_pixel(24, 20, image::Luma([26])).save(blank.join("b.png")).unwrap();
    let overlays = tmp.path().join("overlays");
    ok(&["overlay", "--checkpoint", s(&checkpoint), "--images", s(&blank), "--out", s(&overlays)]);
    let out = image::open(overlays.join("b.png")).unwrap().to_rgb8();
    assert_eq!(out.dimensions(), (24, 20));

    // With full opacity every pixel is either untouched gray or an override color.
    let palette = tmp.path().join("palette.json");
    fs::write(&palette, r##"{"Blob": [1, 2, 3], "Part1": "#010203", "Part2": [1, 2, 3], "Part3": [1, 2, 3]}"##)
        .unwrap();
    let images = tmp.path().join("raw").join("images");
    ok(&[
        "overlay", "--checkpoint", s(&checkpoint), "--images", s(&images), "--out", s(&overlays), "--palette",
        s(&palette), "--alpha", "1",
    ]);
    let out = image::open(overlays.join("synth_0000.png")).unwrap().to_rgb8();
    assert!(out.pixels().all(|p| p.0 == [1, 2, 3] || (p.0[0] == p.0[1] && p.0[1] == p.0[2])));

    fs::write(&palette, r#"{"Nope": [1, 2, 3]}"#).unwrap();
    let bad = [
        "overlay", "--checkpoint", s(&checkpoint), "--images", s(&images), "--out", s(&overlays), "--palette",
        s(&palette),
    ];
    assert_eq!(code(&bad), 2);
}

#[test]
fn prepare_output_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepared(tmp.path());
    let again = tmp.path().join("again");
    let raw = tmp.path().join("raw");
    ok(&[
        "prepare",
        "--annotations",
        s(&raw.join("annotations.json")),
        "--images",
        s(&raw.join("images")),
        "--out",
        s(&again),
        "--folds",
        "3",
        "--holdout",
        "0.2",
        "--priority",
        "Part1,Part2,Part3",
    ]);
    for file in ["folds.csv", "weights.json", "stats.csv"] {
        assert_eq!(fs::read(data.join(file)).unwrap(), fs::read(again.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let run = tmp.path().join("run");

    // Usage and configuration errors.
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&run), "--epochs", "0"]), 2);
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "epochs = 3\nlearning_rat = 0.1\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&config), "--data", s(&missing), "--out", s(&run)]), 2);

    // Data errors leave nothing behind.
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&run)]), 3);
    assert!(!run.exists());
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = tmp.path().join("prepared");
    assert_eq!(
        code(&["prepare", "--annotations", s(&empty), "--images", s(&empty), "--out", s(&out)]),
        3
    );
    assert!(!out.exists());
    assert_eq!(code(&["synth", "--out", s(&out), "--children", "0"]), 2);
}

#[test]
fn train_help_lists_configuration_keys() {
    let help = ok(&["train", "--help"]);
    assert!(help.contains("learning_rate"));
    assert!(help.contains("[schedule]"));
}
