use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "generator": {"landmarks": 12, "image_size": 16, "frames": 12},
  "a2l": {"landmarks": 12, "hidden": 8, "blocks": 2, "window": 6},
  "l2i": {"image_size": 16, "unet": {"base_channels": 4, "time_dim": 4}, "tau": 3},
  "schedule": {"steps": 20},
  "train": {"steps": 3, "a2l_batch": 2, "l2i_batch": 2, "checkpoint_every": 2},
  "infer": {"l2i_stride": 5},
  "eval": {"max_frames": 8}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dreamhead"))
        .args(args)
        .current_dir(dir)
        .env_remove("DREAMHEAD_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn help_and_unknown_flags() {
    let dir = workspace();
    let out = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "train", "infer", "eval", "plot"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert!(!run(dir.path(), &["train", "--bogus"]).status.success());
    assert!(!run(dir.path(), &["frobnicate"]).status.success());
}

#[test]
fn gen_data_layout_and_reproducibility() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "one", "--clips", "1"]);
    let clip = d.join("one/clip_0000");
    for f in ["manifest.json", "landmarks.bin", "audio.bin", "poses.bin", "frames/000000.png", "frames/000011.png"] {
        assert!(clip.join(f).is_file(), "{f}");
    }
    assert!(d.join("one/dataset.json").is_file());

    ok(d, &["gen-data", "--config", "tiny.json", "--out", "two", "--clips", "1"]);
    let (a, b) = (files(&d.join("one")), files(&d.join("two")));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }

    ok(d, &["gen-data", "--config", "tiny.json", "--out", "other", "--clips", "1", "--seed", "7"]);
    assert_ne!(
        std::fs::read(d.join("one/clip_0000/landmarks.bin")).unwrap(),
        std::fs::read(d.join("other/clip_0000/landmarks.bin")).unwrap()
    );

    ok(d, &["gen-data", "--config", "tiny.json", "--out", "none", "--clips", "0"]);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("none/dataset.json")).unwrap()).unwrap();
    assert_eq!(index["clips"], serde_json::json!([]));
}

#[test]
fn seed_environment_variable_is_a_default() {
    let dir = workspace();
    let d = dir.path();
    let gen = |out: &str, env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dreamhead"));
        cmd.args(["gen-data", "--config", "tiny.json", "--out", out, "--clips", "1"])
            .args(extra)
            .current_dir(d)
            .env_remove("DREAMHEAD_SEED");
        if let Some(v) = env {
            cmd.env("DREAMHEAD_SEED", v);
        }
        assert!(cmd.status().unwrap().success());
        std::fs::read(d.join(out).join("clip_0000/landmarks.bin")).unwrap()
    };
    let base = gen("a", None, &[]);
    let env3 = gen("b", Some("3"), &[]);
    let flag3 = gen("c", None, &["--seed", "3"]);
    assert_ne!(base, env3);
    assert_eq!(env3, flag3);
    assert_eq!(gen("d", Some("9"), &["--seed", "3"]), flag3);

    let mut pinned: serde_json::Value = serde_json::from_str(TINY).unwrap();
    pinned["generator"]["seed"] = 0.into();
    std::fs::write(d.join("pinned.json"), pinned.to_string()).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dreamhead"));
    cmd.args(["gen-data", "--config", "pinned.json", "--out", "e", "--clips", "1"])
        .current_dir(d)
        .env("DREAMHEAD_SEED", "3");
    assert!(cmd.status().unwrap().success());
    assert_eq!(std::fs::read(d.join("e/clip_0000/landmarks.bin")).unwrap(), base);

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dreamhead"));
    cmd.args(["gen-data", "--out", "f", "--clips", "1"]).current_dir(d).env("DREAMHEAD_SEED", "x");
    assert!(!cmd.status().unwrap().success());
}

#[test]
fn train_infer_eval_plot() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "data", "--clips", "2"]);
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "test", "--clips", "1", "--seed", "50"]);
    let out = ok(d, &["train", "--config", "tiny.json", "--data", "data", "--out", "run"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
    assert!(out.stdout.is_empty());
    for f in ["run/step_000002.ckpt", "run/last.ckpt", "run/train_log.jsonl", "run/config.json"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "loss_a2l", "loss_l2i", "wall_time"] {
            assert!(r.get(k).is_some(), "{k}");
        }
    }

    ok(d, &["infer", "--ckpt", "run/last.ckpt", "--clip", "test/clip_0000", "--out", "inf", "--frames", "9"]);
    let frames = files(&d.join("inf/frames"));
    assert_eq!(frames.len(), 9);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("inf/inference.json")).unwrap()).unwrap();
    assert_eq!(manifest["frames"], 9);
    assert_eq!(std::fs::metadata(d.join("inf/landmarks.bin")).unwrap().len(), 9 * 12 * 3 * 4);
    ok(d, &["infer", "--ckpt", "run/last.ckpt", "--clip", "test/clip_0000", "--out", "inf2", "--frames", "9"]);
    for (a, b) in frames.iter().zip(files(&d.join("inf2/frames"))) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    ok(
        d,
        &[
            "infer", "--ckpt", "run/last.ckpt", "--clip", "test/clip_0000", "--audio", "data/clip_0001", "--out", "inf3",
            "--single-frame", "4",
        ],
    );
    assert_eq!(files(&d.join("inf3/frames")).len(), 12);

    ok(d, &["eval", "--config", "tiny.json", "--ckpt", "full=run/last.ckpt", "--ckpt", "run/step_000002.ckpt", "--data", "test", "--out", "ev"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    for k in ["lmd", "lmd_v", "ma", "error_norm", "jitter", "frame_consistency"] {
        assert!(report[k].is_f64(), "{k}");
    }
    let labels: Vec<_> = report["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(
        labels,
        ["full", "full/gt_landmarks", "run/step_000002.ckpt", "run/step_000002.ckpt/gt_landmarks"]
    );

    ok(d, &["plot", "--report", "ev/report.json", "--out", "p1"]);
    ok(d, &["plot", "--report", "ev/report.json", "--out", "p2"]);
    ok(d, &["plot", "--log", "run/train_log.jsonl", "--out", "p1"]);
    ok(d, &["plot", "--clip", "test/clip_0000", "--ckpt", "run/last.ckpt", "--out", "p1", "--frame", "3"]);
    for f in ["metric_lmd.svg", "loss.svg", "lip_opening.svg", "frames.png", "generated.png", "denoising_000003.png"] {
        assert!(std::fs::metadata(d.join("p1").join(f)).unwrap().len() > 0, "{f}");
    }
    for f in files(&d.join("p2")) {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(d.join("p1").join(name)).unwrap());
    }

    ok(d, &["eval", "--config", "tiny.json", "--taus", "1,2", "--train-data", "data", "--data", "test", "--out", "sweep", "--no-plots"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sweep/report.json")).unwrap()).unwrap();
    let labels: Vec<_> = report["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["tau=1", "tau=1/gt_landmarks", "tau=2", "tau=2/gt_landmarks"]);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = workspace();
    let d = dir.path();
    std::fs::write(d.join("empty.json"), r#"{"rows": []}"#).unwrap();
    let out = run(d, &["plot", "--report", "empty.json", "--out", "p"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    assert!(!run(d, &["plot", "--out", "p"]).status.success());
    assert!(!run(d, &["train", "--config", "tiny.json", "--data", "missing", "--out", "r"]).status.success());
    assert!(!run(d, &["infer", "--ckpt", "missing.ckpt", "--clip", "x", "--out", "o"]).status.success());
    std::fs::write(d.join("bad.json"), r#"{"a2l": {"windw": 3}}"#).unwrap();
    let out = run(d, &["gen-data", "--config", "bad.json", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("windw"));
    ok(d, &["gen-data", "--config", "tiny.json", "--out", "e", "--clips", "0"]);
    assert!(!run(d, &["train", "--config", "tiny.json", "--data", "e", "--out", "r"]).status.success());
}
