use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vncseg_core::io::{write_labels, write_volume};
use vncseg_core::{Geometry, LabelVolume, Volume};

fn vncseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vncseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vncseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn classes(report: &Value) -> &Vec<Value> {
    report["cases"][0]["classes"].as_array().unwrap()
}

/// Exactly one stderr line, prefixed `error:`.
fn assert_single_line_error(out: &Output) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with("error"), "stderr: {err}");
}

fn toy_labels(n: usize, voxels: &[([usize; 3], u8)]) -> LabelVolume {
    let g = Geometry::cube(n, 1.0);
    let mut data = vec![0u8; g.len()];
    for &([x, y, z], c) in voxels {
        data[g.index(x, y, z)] = c;
    }
    LabelVolume::new(g, data).unwrap()
}

#[test]
fn evaluate_identical_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cube = |c: u8, o: usize| (0..8).map(move |i| ([o + i % 2, o + (i / 2) % 2, o + i / 4], c));
    let reference = toy_labels(12, &(1..8).flat_map(|c| cube(c, c as usize)).collect::<Vec<_>>());
    write_labels(&reference, dir.path().join("ref")).unwrap();
    write_labels(&LabelVolume::background(*reference.geometry()), dir.path().join("bg")).unwrap();

    let out = dir.path().join("same.json");
    ok(&["evaluate", "--pred", p(&dir.path().join("ref")), "--ref", p(&dir.path().join("ref")), "--out", p(&out)]);
    for c in classes(&json(&out)) {
        assert_eq!(c["dsc"], 1.0);
        assert_eq!(c["assd_mm"], 0.0);
    }
    assert!(dir.path().join("same.txt").exists());

    let out = dir.path().join("bg.json");
    ok(&["evaluate", "--pred", p(&dir.path().join("bg")), "--ref", p(&dir.path().join("ref")), "--out", p(&out)]);
    let r = json(&out);
    for c in classes(&r) {
        assert_eq!(c["dsc"], 0.0);
        assert!(c["assd_mm"].is_null());
    }
    assert_eq!(r["summary"]["classes"][0]["assd_undefined"], 1);
}

#[test]
fn evaluate_toy_fixture_half_overlap() {
    // |A| = |B| = 4 voxels of class 3, two shared.
    let a = toy_labels(8, &[([1, 1, 1], 3), ([2, 1, 1], 3), ([3, 1, 1], 3), ([4, 1, 1], 3)]);
    let b = toy_labels(8, &[([3, 1, 1], 3), ([4, 1, 1], 3), ([5, 1, 1], 3), ([6, 1, 1], 3)]);
    let dir = tempfile::tempdir().unwrap();
    write_labels(&a, dir.path().join("a")).unwrap();
    write_labels(&b, dir.path().join("b")).unwrap();
    let out = dir.path().join("r.json");
    ok(&["evaluate", "--pred", p(&dir.path().join("a")), "--ref", p(&dir.path().join("b")), "--out", p(&out)]);
    let c = classes(&json(&out)).iter().find(|c| c["class_id"] == 3).unwrap().clone();
    assert_eq!(c["dsc"], 0.5);
    // Every voxel is surface; distances 2,1,0,0 in each direction.
    assert_eq!(c["assd_mm"], 0.75);
}

#[test]
fn evaluate_rejects_mismatched_geometry() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(&toy_labels(8, &[]), dir.path().join("a")).unwrap();
    write_labels(&toy_labels(9, &[]), dir.path().join("b")).unwrap();
    let out = vncseg(&["evaluate", "--pred", p(&dir.path().join("a")), "--ref", p(&dir.path().join("b")), "--out", p(&dir.path().join("r.json"))]);
    assert_single_line_error(&out);
}

fn ramp_image(n: usize) -> Volume {
    let g = Geometry::cube(n, 1.0);
    let data = (0..g.len()).map(|i| (i % 97) as f32 * 10.0 - 400.0).collect();
    Volume::from_f32(g, data).unwrap()
}

fn windowed(hu: f64) -> u8 {
    // Window [-400, 600] to 0..255, round half away from zero.
    ((hu + 400.0) / 1000.0 * 255.0).clamp(0.0, 255.0).round() as u8
}

fn ppm_pixels(path: &Path, w: usize, h: usize) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let header = format!("P6\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    bytes[header.len()..].to_vec()
}

#[test]
fn report_background_overlay_is_plain_grayscale() {
    let dir = tempfile::tempdir().unwrap();
    let image = ramp_image(6);
    write_volume(&image, dir.path().join("img")).unwrap();
    write_labels(&LabelVolume::background(image.geometry), dir.path().join("lab")).unwrap();
    let out = dir.path().join("ov");
    ok(&["report", "--image", p(&dir.path().join("img")), "--labels", p(&dir.path().join("lab")), "--out", p(&out)]);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 6);
    for z in 0..6 {
        let px = ppm_pixels(&out.join(format!("slice_{z:04}.ppm")), 6, 6);
        for y in 0..6 {
            for x in 0..6 {
                let g = windowed(image.get(x, y, z));
                assert_eq!(&px[(y * 6 + x) * 3..][..3], &[g, g, g]);
            }
        }
    }
}

#[test]
fn report_single_aorta_voxel() {
    let dir = tempfile::tempdir().unwrap();
    let image = ramp_image(5);
    write_volume(&image, dir.path().join("img")).unwrap();
    write_labels(&toy_labels(5, &[([3, 1, 2], 6)]), dir.path().join("lab")).unwrap();
    let out = dir.path().join("ov");
    ok(&["report", "--image", p(&dir.path().join("img")), "--labels", p(&dir.path().join("lab")), "--out", p(&out)]);
    let mut blended = Vec::new();
    for z in 0..5 {
        let px = ppm_pixels(&out.join(format!("slice_{z:04}.ppm")), 5, 5);
        for y in 0..5 {
            for x in 0..5 {
                let g = windowed(image.get(x, y, z));
                if px[(y * 5 + x) * 3..][..3] != [g, g, g] {
                    blended.push(([x, y, z], px[(y * 5 + x) * 3..][..3].to_vec(), g));
                }
            }
        }
    }
    assert_eq!(blended.len(), 1);
    let ([x, y, z], rgb, g) = blended.pop().unwrap();
    assert_eq!([x, y, z], [3, 1, 2]);
    // Aorta is magenta; alpha 0.4.
    let mix = |c: f64| (0.6 * g as f64 + 0.4 * c).round() as u8;
    assert_eq!(rgb, vec![mix(255.0), mix(0.0), mix(255.0)]);
}

#[test]
fn predict_without_checkpoints_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    write_volume(&ramp_image(8), dir.path().join("img")).unwrap();
    fs::create_dir(dir.path().join("models")).unwrap();
    let out = vncseg(&["predict", "--model", p(&dir.path().join("models")), "--input", p(&dir.path().join("img")), "--out", p(&dir.path().join("pred"))]);
    assert_single_line_error(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoints"));
}

#[test]
fn bad_flags_and_configs_exit_nonzero() {
    let out = vncseg(&["crossval", "--connectivity", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim_end().lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"iterations": 5, "learning_rate": 1}}"#).unwrap();
    assert_single_line_error(&vncseg(&["preprocess", "--config", p(&cfg), "--data", "x", "--out", "y"]));
}

#[test]
fn small_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    ok(&["phantom", "gen", "--out", p(&data), "--count", "3", "--size", "32", "--seed", "4"]);
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["entries"][1]["seed"], 5);

    let pre = dir.path().join("pre");
    ok(&["preprocess", "--data", p(&data), "--out", p(&pre)]);
    assert_eq!(json(&pre.join("manifest.json"))["preprocessed"], true);

    let common = ["--iters", "6", "--batch", "2", "--base-channels", "4", "--seed", "2"];
    let mut args = vec!["train", "--data", p(&pre), "--out", p(&run)];
    args.extend(common);
    ok(&args);
    for f in ["final.ckpt.json", "final.ckpt.raw", "best.ckpt.json", "loss.csv", "config.json", "split.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(log.starts_with("iteration,lr,loss,val_dice\n"));

    // The resolved config reproduces the run.
    let resolved = run.join("config.json");
    let cfg: vncseg::config::ExperimentConfig = serde_json::from_str(&fs::read_to_string(&resolved).unwrap()).unwrap();
    assert_eq!(cfg.train.iterations, 6);
    assert_eq!(cfg.network.base_channels, 4);
    let rerun = dir.path().join("rerun");
    ok(&["train", "--config", p(&resolved), "--out", p(&rerun)]);
    assert_eq!(fs::read(run.join("final.ckpt.raw")).unwrap(), fs::read(rerun.join("final.ckpt.raw")).unwrap());

    let models = dir.path().join("models");
    fs::create_dir(&models).unwrap();
    for ext in ["json", "raw"] {
        fs::copy(run.join(format!("final.ckpt.{ext}")), models.join(format!("a.ckpt.{ext}"))).unwrap();
    }
    let input = data.join(manifest["entries"][0]["vnc_path"].as_str().unwrap());
    for name in ["p1", "p2"] {
        ok(&["predict", "--model", p(&models), "--input", p(&input), "--out", p(&dir.path().join(name))]);
    }
    for suffix in [".mvol.json", ".mvol.raw", ".volumes.json"] {
        let read = |n: &str| fs::read(dir.path().join(format!("{n}{suffix}"))).unwrap();
        assert_eq!(read("p1"), read("p2"), "{suffix} differs between runs");
    }
    let volumes = json(&dir.path().join("p1.volumes.json"));
    assert_eq!(volumes["structures"].as_array().unwrap().len(), 7);
    let labels = vncseg_core::io::read_labels(dir.path().join("p1")).unwrap();
    assert_eq!(labels.dims(), [32, 32, 32]);
}
