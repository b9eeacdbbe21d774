use std::path::Path;

use assert_cmd::Command;
use nodulesynth::dataset::{Dataset, MANIFEST};
use nodulesynth::io::{read_json, write_json, write_mask};
use nodulesynth_core::mask::disk;
use serde_json::Value;

fn bin(cache: &Path) -> Command {
    let mut c = Command::cargo_bin("nodulesynth").unwrap();
    c.env("NODULESYNTH_CACHE", cache).env("RUST_LOG", "warn");
    c
}

fn stdout_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn phantom_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        bin(dir.path())
            .args([
                "phantom",
                "--seed",
                "5",
                "--normals",
                "1",
                "--nodules",
                "2",
                "--size",
                "256",
                "--out",
            ])
            .arg(dir.path().join(name))
            .assert()
            .success();
    }
    let a = std::fs::read(dir.path().join("a").join(MANIFEST)).unwrap();
    let b = std::fs::read(dir.path().join("b").join(MANIFEST)).unwrap();
    assert_eq!(a, b);
    assert_eq!(Dataset::open(&dir.path().join("a")).unwrap().items.len(), 3);
}

#[test]
fn modulated_mask_measures_target() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.png");
    write_mask(&src, &disk(64, 64, 30.0, 34.0, 12.0)).unwrap();
    let out = dir.path().join("out.png");
    bin(dir.path())
        .args(["modulate", "--d", "70", "--in"])
        .arg(&src)
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    let o = bin(dir.path())
        .arg("eval")
        .arg("--mask")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let d = stdout_json(&o)["diameter"].as_f64().unwrap();
    assert!((d - 70.0).abs() <= 2.0, "{d}");
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(dir.path())
        .args(["--set", "phantom.size=\"big\"", "phantom", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("phantom.size"));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"detector": {"chanels": 4}}"#).unwrap();
    let o = bin(dir.path())
        .arg("--config")
        .arg(&cfg)
        .args(["phantom", "--out"])
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("detector.chanels"));
}

#[test]
fn config_prints_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(dir.path())
        .args(["--set", "hem.n_synthetic=12", "config"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["hem"]["n_synthetic"], 12);
    assert_eq!(v["phantom"]["size"], 1024);
}

#[test]
fn froc_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.json");
    let anns = dir.path().join("a.json");
    write_json(
        &preds,
        &serde_json::json!([
            {"image_id": "1", "boxes": [[10, 10, 20, 20, 0.9], [50, 50, 60, 60, 0.8]]},
            {"image_id": "2", "boxes": [[0, 0, 5, 5, 0.3]]}
        ]),
    )
    .unwrap();
    write_json(
        &anns,
        &serde_json::json!([
            {"image_id": "1", "boxes": [[10, 10, 20, 20]]},
            {"image_id": "2", "boxes": []},
            {"image_id": "3", "boxes": [[30, 30, 40, 40]]}
        ]),
    )
    .unwrap();
    let out = dir.path().join("froc.json");
    bin(dir.path())
        .arg("froc")
        .arg("--predictions")
        .arg(&preds)
        .arg("--annotations")
        .arg(&anns)
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    let v: Value = read_json(&out).unwrap();
    // One of two nodules found before any false positive.
    assert!(
        (v["sen_at_0_25"].as_f64().unwrap() - 0.5).abs() < 1e-9,
        "{v}"
    );
    let s = v["node21_score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s));
}

/// Tiny models through every training and generation command.
#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let small = [
        "--set",
        "shape_gan.base_channels=16",
        "--set",
        "shape_gan.batch_size=2",
        "--set",
        "shape_gan.checkpoint_every=1",
        "--set",
        "texture_gan.base_channels=4",
        "--set",
        "texture_gan.disc_channels=4",
        "--set",
        "texture_gan.batch_size=1",
        "--set",
        "texture_gan.extractor.width_divisor=16",
        "--set",
        "detector.channels=4",
        "--set",
        "detector_train.batch_size=2",
        "--set",
        "hem.finetune.epochs=1",
        "--set",
        "hem.finetune.batch_size=2",
    ];
    bin(d)
        .args(small)
        .args([
            "phantom",
            "--seed",
            "2",
            "--normals",
            "3",
            "--nodules",
            "3",
            "--size",
            "512",
            "--out",
        ])
        .arg(&data)
        .assert()
        .success();

    bin(d)
        .args(small)
        .args(["train-shape", "--epochs", "2", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(d.join("shape"))
        .assert()
        .success();
    let shape = d.join("shape/shape_gan_epoch2.safetensors");
    assert!(shape.exists() && d.join("shape/shape_gan_epoch1.safetensors").exists());
    let log = std::fs::read_to_string(d.join("shape/shape_gan_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    bin(d)
        .args(small)
        .args(["train-texture", "--steps", "2", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(d.join("tex"))
        .assert()
        .success();
    let texture = std::fs::read_dir(d.join("tex"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "safetensors"))
        .unwrap();
    assert!(d.join("tex/texture_gan_log.csv").exists());

    let o = bin(d)
        .args(small)
        .args([
            "generate",
            "--mode",
            "mask",
            "--grid",
            "1x3",
            "--shape-ckpt",
        ])
        .arg(&shape)
        .arg("--out")
        .arg(d.join("grid.png"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for cell in stdout_json(&o).as_array().unwrap() {
        let (t, m) = (
            cell["target"].as_f64().unwrap(),
            cell["measured"].as_f64().unwrap(),
        );
        assert!((t - m).abs() <= 2.0, "{cell}");
    }

    bin(d)
        .args(small)
        .args([
            "generate",
            "--mode",
            "image",
            "--grid",
            "1x2",
            "--diameters",
            "40",
            "--shape-ckpt",
        ])
        .arg(&shape)
        .arg("--texture-ckpt")
        .arg(&texture)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(d.join("gen"))
        .assert()
        .success();
    assert_eq!(Dataset::open(&d.join("gen")).unwrap().items.len(), 2);

    let det = d.join("det.safetensors");
    bin(d)
        .args(small)
        .args(["train-detector", "--epochs", "1", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&det)
        .arg("--eval")
        .arg(&data)
        .assert()
        .success();
    assert!(d.join("det.froc.json").exists());

    bin(d)
        .args(small)
        .args(["augment", "--n", "2", "--detector-ckpt"])
        .arg(&det)
        .arg("--shape-ckpt")
        .arg(&shape)
        .arg("--texture-ckpt")
        .arg(&texture)
        .arg("--data")
        .arg(&data)
        .arg("--mining")
        .arg(&data)
        .arg("--held-out")
        .arg(&data)
        .arg("--out")
        .arg(d.join("aug"))
        .assert()
        .success();
    let report: Value = read_json(&d.join("aug/report.json")).unwrap();
    assert_eq!(report["n_synthetic"].as_u64().unwrap(), 2);
    assert!(d.join("aug/detector_finetuned.safetensors").exists());
    assert_eq!(
        Dataset::open(&d.join("aug/synthetic")).unwrap().items.len(),
        2
    );
}
