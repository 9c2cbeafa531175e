use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use echoreflect_core::data::{load_mask, PALETTE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echoreflect"))
}

fn run(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().unwrap()
}

/// Synthesizes a small dataset and trains a few iterations on it.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let out = dir.join("run");
    let o = run(&["synth", "--count", "8", "--size", "32", "--seed", "1"], &[("--out", &data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(
        &["train", "--quiet", "--image-size", "32", "--widths", "8,16", "--max-iters", "3", "--labeled-ratio", "0.5"],
        &[("--data", &data), ("--out", &out)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (data, out)
}

#[test]
fn train_predict_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = trained(dir.path());
    for f in ["train_log.csv", "split.json", "config.effective.toml", "checkpoint_last.erck"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let ck = out.join("checkpoint_last.erck");

    let mask_path = dir.path().join("pred.png");
    let overlay = dir.path().join("overlay.png");
    let o = run(
        &["predict"],
        &[
            ("--checkpoint", &ck),
            ("--image", &data.join("images/p0000_00.png")),
            ("--out", &mask_path),
            ("--overlay", &overlay),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = load_mask(&mask_path, 32, 4).unwrap();
    let ov = image::open(&overlay).unwrap().to_rgb8();
    assert_eq!(ov.dimensions(), (32, 32));
    for cls in 1..=4u8 {
        let expected = mask.data().iter().filter(|&&v| v == cls).count();
        let painted = ov.pixels().filter(|p| p.0 == PALETTE[cls as usize]).count();
        assert_eq!(painted, expected, "class {cls}: {painted} painted vs {expected} predicted");
    }

    let report = dir.path().join("eval");
    let o = run(&["eval", "--split", "all"], &[("--checkpoint", &ck), ("--data", &data), ("--out", &report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(report.join("eval_report.csv")).unwrap();
    assert!(summary.starts_with("class,dice,jaccard,hd95,asd"));
    let cases = std::fs::read_to_string(report.join("eval_cases.csv")).unwrap();
    assert!(cases.starts_with("case,class,dice,jaccard,hd95,asd"));
}

#[test]
fn conflicting_flags_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["train", "--disable-mms", "--fixed-n", "2", "--max-iters", "1"],
        &[("--data", dir.path()), ("--out", &dir.path().join("o"))],
    );
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_data_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--max-iters", "1"], &[("--data", &dir.path().join("none")), ("--out", dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let o = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
