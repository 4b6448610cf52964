//! End-to-end runs of the `tdm` binary on a deliberately tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tdm");

const TINY_CONFIG: &str = r#"{
  "model": {"base_channels": 8, "channel_mult": [1, 2], "attn_resolutions": [16],
            "time_dim": 16, "cond_dim": 16, "max_groups": 4},
  "schedule": {"ddim_steps": 8},
  "train": {"steps": 6, "batch_size": 4},
  "lora": {"rank": 2, "steps": 4},
  "morph": {"n": 4, "ddim_steps": 8}
}"#;

fn tdm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("TDM_MODEL_DIR").output().expect("spawn tdm")
}

fn ok(args: &[&str]) -> Output {
    let out = tdm(args);
    assert!(
        out.status.success(),
        "tdm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data and train into `root`, returning (data dir, model dir).
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let model = root.join("model");
    let cfg = root.join("run.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    ok(&["gen-data", "--out", s(&data), "--count", "2", "--size", "32", "--seed", "5"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model)]);
    (data, model)
}

fn first_image(data: &Path, class: &str) -> PathBuf {
    let mut names: Vec<_> = fs::read_dir(data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(&format!("_{class}.png")))
        .collect();
    names.sort();
    names.remove(0)
}

#[test]
fn gen_data_writes_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["gen-data", "--out", s(&out), "--classes", "ellipse,cross", "--count", "3", "--size", "32", "--seed", "1"]);
    let pngs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 6);
    let labels: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels["classes"], serde_json::json!(["ellipse", "cross"]));
    assert_eq!(labels["items"].as_array().unwrap().len(), 6);
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--out", "x", "--count", "1", "--bogus"],
        vec!["gen-data", "--count", "1"],
        vec!["gen-data", "--out", s(dir.path()), "--count", "1", "--size", "48"],
        vec!["eval", "--frames", "/nonexistent/frames", "--report", "r.json"],
        vec!["fit-lora", "--image", "a.png", "--class", "0", "--out", "l.tdm"],
        vec!["invert", "--model", "/nonexistent", "--image", "a.png", "--class", "0", "--out", "z.tdm"],
    ];
    for args in cases {
        let out = tdm(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error"), "{args:?}: {err}");
    }
}

#[test]
fn eval_on_identical_frames_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--count", "1", "--size", "32", "--seed", "2"]);
    let frames = dir.path().join("frames");
    fs::create_dir(&frames).unwrap();
    let img = first_image(&data, "ellipse");
    for i in 0..5 {
        fs::copy(&img, frames.join(format!("frame_{i:03}.png"))).unwrap();
    }
    let report = dir.path().join("r.json");
    ok(&["eval", "--frames", s(&frames), "--report", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["ppl"], 0.0);
    assert_eq!(r["pdv"], 0.0);
    assert_eq!(r["frames"], 5);
}

#[test]
fn pipeline_runs_and_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let a = first_image(&data, "ellipse");
    let b = first_image(&data, "cross");

    let run = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let out = dir.path().join(tag);
        fs::create_dir_all(&out).unwrap();
        let la = out.join("a.tdm");
        let lb = out.join("b.tdm");
        ok(&["fit-lora", "--model", s(&model), "--image", s(&a), "--class", "ellipse", "--out", s(&la), "--seed", "3"]);
        ok(&["fit-lora", "--model", s(&model), "--image", s(&b), "--class", "2", "--out", s(&lb), "--seed", "4"]);
        let z = out.join("z.tdm");
        let inv = ok(&["invert", "--model", s(&model), "--lora", s(&la), "--image", s(&a), "--class", "0", "--out", s(&z)]);
        assert!(String::from_utf8_lossy(&inv.stdout).contains("PSNR"));
        let frames = out.join("frames");
        ok(&[
            "morph", "--model", s(&model), "--image-a", s(&a), "--image-b", s(&b), "--class-a", "ellipse",
            "--class-b", "cross", "--lora-a", s(&la), "--lora-b", s(&lb), "--frames", "4", "--lambda", "0.5",
            "--adain-stage", "initial-noise", "--reschedule", "--seed", "9", "--out", s(&frames),
        ]);
        let report = out.join("report.json");
        ok(&["eval", "--frames", s(&frames), "--report", s(&report)]);
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for p in [la, lb, z, report] {
            files.push((p.file_name().unwrap().to_string_lossy().into(), fs::read(&p).unwrap()));
        }
        let mut names: Vec<_> = fs::read_dir(&frames).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            files.push((p.file_name().unwrap().to_string_lossy().into(), fs::read(&p).unwrap()));
        }
        files
    };

    let first = run("one");
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        &names[4..],
        ["frame_000.png", "frame_001.png", "frame_002.png", "frame_003.png", "frame_004.png", "sequence.json"]
    );
    let second = run("two");
    assert_eq!(first, second);

    let seq: serde_json::Value =
        serde_json::from_slice(&first.iter().find(|(n, _)| n == "sequence.json").unwrap().1).unwrap();
    assert_eq!(seq["alphas"].as_array().unwrap().len(), 5);
    assert_eq!(seq["config"]["morph"]["lambda"], 0.5);
    assert_eq!(seq["config"]["morph"]["reschedule"], true);
    let report: serde_json::Value =
        serde_json::from_slice(&first.iter().find(|(n, _)| n == "report.json").unwrap().1).unwrap();
    assert_eq!(report["config_hash"], seq["config_hash"]);
}

#[test]
fn model_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let a = first_image(&data, "polygon-3");
    let out = dir.path().join("l.tdm");
    let status = Command::new(BIN)
        .args(["fit-lora", "--image", s(&a), "--class", "polygon-3", "--out", s(&out), "--steps", "2"])
        .env("TDM_MODEL_DIR", &model)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.exists());
}

#[test]
fn eval_rejects_tampered_frames() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = setup(dir.path());
    let a = first_image(&data, "ellipse");
    let b = first_image(&data, "cross");
    let frames = dir.path().join("frames");
    ok(&[
        "morph", "--model", s(&model), "--image-a", s(&a), "--image-b", s(&b), "--class-a", "0", "--class-b", "2",
        "--frames", "2", "--adain-stage", "off", "--out", s(&frames),
    ]);
    fs::copy(frames.join("frame_000.png"), frames.join("frame_001.png")).unwrap();
    let report = dir.path().join("r.json");
    let out = tdm(&["eval", "--frames", s(&frames), "--report", s(&report)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame_001.png"));
}
