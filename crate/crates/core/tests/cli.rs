//! Integration tests of the `mitodet` binary: file formats, exit codes, and
//! agreement between stage-wise invocation and the end-to-end `run`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn mitodet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mitodet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_code(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Forward Beer-Lambert synthetic H&E-like image.
fn synthetic_stain_image(seed: u64, side: u32) -> RgbImage {
    let mut rng = StdRng::seed_from_u64(seed);
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let h = unit([
        0.60 + rng.random_range(-0.05..0.05),
        0.70 + rng.random_range(-0.05..0.05),
        0.30,
    ]);
    let e = unit([0.09, 0.95, 0.14 + rng.random_range(-0.03..0.03)]);
    RgbImage::from_fn(side, side, |_, _| {
        let (c1, c2) = match rng.random_range(0..5u8) {
            0 | 1 => (rng.random_range(0.5..1.5), rng.random_range(0.0..0.04)),
            2 | 3 => (rng.random_range(0.0..0.04), rng.random_range(0.5..1.5)),
            _ => (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)),
        };
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let od = h[ch] * c1 + e[ch] * c2;
            px[ch] = (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

fn write_gt(path: &Path, roi_id: &str, centers: &[(f64, f64)]) {
    let lines: String = centers
        .iter()
        .map(|(x, y)| {
            format!(r#"{{"roi_id":"{roi_id}","x":{x},"y":{y},"label":"mitotic_figure"}}"#) + "\n"
        })
        .collect();
    std::fs::write(path, lines).unwrap();
}

#[test]
fn plan_tiles_writes_reference_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = mitodet(
        &[
            "plan-tiles",
            "--roi-width",
            "6100",
            "--roi-height",
            "5800",
            "--out",
            "grid.json",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let text = std::fs::read_to_string(dir.path().join("grid.json")).unwrap();
    let grid: serde_json::Value = serde_json::from_str(&text).unwrap();
    let tiles = grid["tiles"].as_array().unwrap();
    assert_eq!(tiles.len(), 156);
    assert_eq!(tiles[155]["origin"], serde_json::json!([5460, 5160]));
    assert_eq!(tiles[0]["clamped"], serde_json::json!(false));
    assert_eq!(grid["roi"]["width_px"], serde_json::json!(6100));
}

#[test]
fn stain_bank_fit_and_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("rois");
    std::fs::create_dir(&images).unwrap();
    for i in 0..4u64 {
        synthetic_stain_image(100 + i, 48)
            .save(images.join(format!("case-{i}.png")))
            .unwrap();
    }
    let out = mitodet(
        &[
            "fit-stain-bank",
            "--images",
            "rois",
            "--n",
            "4",
            "--out",
            "bank.json",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let bank: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bank.json")).unwrap())
            .unwrap();
    assert_eq!(bank["apply_probability"], serde_json::json!(0.25));
    let profiles = bank["profiles"].as_array().unwrap();
    assert_eq!(profiles.len(), 4);
    assert_eq!(profiles[0]["source_roi"], serde_json::json!("case-0"));
    assert_eq!(profiles[0]["stain_matrix"].as_array().unwrap().len(), 9);
    assert_eq!(profiles[0]["max_conc"].as_array().unwrap().len(), 2);

    synthetic_stain_image(999, 48)
        .save(dir.path().join("input.png"))
        .unwrap();
    let out = mitodet(
        &[
            "normalize",
            "--image",
            "input.png",
            "--bank",
            "bank.json",
            "--profile",
            "case-2",
            "--out",
            "normalized.png",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let normalized = image::open(dir.path().join("normalized.png")).unwrap();
    assert_eq!(normalized.width(), 48);

    // Unknown profile id is a config error.
    let out = mitodet(
        &[
            "normalize",
            "--image",
            "input.png",
            "--bank",
            "bank.json",
            "--profile",
            "nope",
            "--out",
            "x.png",
        ],
        dir.path(),
    );
    assert_code(&out, 2);
}

#[test]
fn stage_wise_matches_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::from_pixel(1500, 1100, Rgb([250, 245, 250]))
        .save(dir.path().join("roi.png"))
        .unwrap();
    write_gt(
        &dir.path().join("gt.jsonl"),
        "roi",
        &[(320.0, 260.0), (700.0, 540.0), (1200.0, 900.0), (510.0, 510.0)],
    );
    std::fs::write(
        dir.path().join("mock.json"),
        r#"{"position_jitter": 2.0, "score_jitter": 0.05, "false_positive_rate": 1.0}"#,
    )
    .unwrap();

    let out = mitodet(
        &[
            "run",
            "--roi",
            "roi.png",
            "--mock",
            "mock.json",
            "--gt",
            "gt.jsonl",
            "--seed",
            "5",
            "--out-dir",
            "full",
            "--keep-intermediate",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    for artifact in ["fused.jsonl", "report.json", "resolved_config.json", "grid.json", "raw.jsonl"] {
        assert!(
            dir.path().join("full").join(artifact).exists(),
            "missing {artifact}"
        );
    }

    // Raw records carry provenance; re-fusing them reproduces fused.jsonl.
    let raw_text = std::fs::read_to_string(dir.path().join("full/raw.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(raw_text.lines().next().unwrap()).unwrap();
    assert!(first.get("tile").is_some() && first.get("tta").is_some());

    let out = mitodet(
        &[
            "fuse",
            "--dets",
            "full/raw.jsonl",
            "--grid",
            "full/grid.json",
            "--min-confidence",
            "0.25",
            "--out",
            "refused.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let full = std::fs::read(dir.path().join("full/fused.jsonl")).unwrap();
    let staged = std::fs::read(dir.path().join("refused.jsonl")).unwrap();
    assert_eq!(full, staged, "stage-wise fuse differs from end-to-end run");

    // Stage-wise evaluation agrees with the run's report.
    let out = mitodet(
        &[
            "evaluate",
            "--preds",
            "full/fused.jsonl",
            "--gt",
            "gt.jsonl",
            "--mpp",
            "0.25",
            "--dist-um",
            "7.5",
            "--out",
            "report2.json",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("full/report.json")).unwrap())
            .unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report2.json")).unwrap())
            .unwrap();
    assert_eq!(a, b);
    assert_eq!(a["per_image"][0]["roi_id"], serde_json::json!("roi"));
}

#[test]
fn infer_emits_raw_detections() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::from_pixel(700, 700, Rgb([255; 3]))
        .save(dir.path().join("tiny.png"))
        .unwrap();
    write_gt(&dir.path().join("gt.jsonl"), "tiny", &[(350.0, 350.0)]);
    std::fs::write(dir.path().join("mock.json"), "{}").unwrap();
    let out = mitodet(
        &[
            "infer",
            "--roi",
            "tiny.png",
            "--mock",
            "mock.json",
            "--gt",
            "gt.jsonl",
            "--out",
            "dets.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let text = std::fs::read_to_string(dir.path().join("dets.jsonl")).unwrap();
    // 700x700 at 640/480 -> 2x2 grid; the center point lands in all 4 tiles
    // under all 3 default TTA variants.
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["roi_id"], serde_json::json!("tiny"));
        assert_eq!(v["label"], serde_json::json!("mitotic_figure"));
        assert_eq!(v["score"], serde_json::json!(0.9));
    }
}

#[test]
fn manifest_and_batches_flow() {
    let dir = tempfile::tempdir().unwrap();
    let rois = r#"{"id":"h1","width_px":1120,"height_px":640,"mpp":0.25,"domain":"human","tumor_type":"breast carcinoma"}
{"id":"c1","width_px":1120,"height_px":640,"mpp":0.25,"domain":"canine","tumor_type":"lung carcinoma"}
"#;
    std::fs::write(dir.path().join("rois.jsonl"), rois).unwrap();
    let gt = r#"{"roi_id":"h1","x":100.0,"y":100.0,"label":"mitotic_figure"}
{"roi_id":"c1","x":700.0,"y":300.0,"label":"mitotic_figure"}
"#;
    std::fs::write(dir.path().join("gt.jsonl"), gt).unwrap();

    let out = mitodet(
        &[
            "make-manifest",
            "--rois",
            "rois.jsonl",
            "--gt",
            "gt.jsonl",
            "--supplement",
            "2",
            "--seed",
            "3",
            "--out",
            "manifest.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let text = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    // Two 2-tile grids, one annotated tile per ROI, plus 2 background tiles.
    assert_eq!(text.lines().count(), 4);
    let annotated = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["background"] == serde_json::json!(false))
        .count();
    assert_eq!(annotated, 2);

    let out = mitodet(
        &[
            "sample-batches",
            "--manifest",
            "manifest.jsonl",
            "--batch",
            "2",
            "--fraction",
            "0.5",
            "--seed",
            "7",
            "--num-batches",
            "5",
            "--out",
            "batches.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let text = std::fs::read_to_string(dir.path().join("batches.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines() {
        let batch: Vec<String> = serde_json::from_str(line).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.iter().filter(|id| id.starts_with("h1")).count(), 1);
        assert_eq!(batch.iter().filter(|id| id.starts_with("c1")).count(), 1);
    }
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::from_pixel(640, 640, Rgb([255; 3]))
        .save(dir.path().join("roi.png"))
        .unwrap();
    std::fs::write(dir.path().join("mock.json"), "{}").unwrap();

    // Config error: invalid stride via config file.
    std::fs::write(dir.path().join("bad.json"), r#"{"stride": 700}"#).unwrap();
    let out = mitodet(
        &[
            "run",
            "--roi",
            "roi.png",
            "--mock",
            "mock.json",
            "--config",
            "bad.json",
            "--out-dir",
            "out1",
        ],
        dir.path(),
    );
    assert_code(&out, 2);
    assert!(!dir.path().join("out1").exists(), "partial outputs written");

    // I/O error: missing ROI image.
    let out = mitodet(
        &[
            "run",
            "--roi",
            "missing.png",
            "--mock",
            "mock.json",
            "--out-dir",
            "out2",
        ],
        dir.path(),
    );
    assert_code(&out, 3);
    assert!(!dir.path().join("out2").exists());

    // Backend error: ONNX model not available.
    let out = mitodet(
        &[
            "run",
            "--roi",
            "roi.png",
            "--model",
            "missing.onnx",
            "--out-dir",
            "out3",
        ],
        dir.path(),
    );
    assert_code(&out, 4);
    assert!(!dir.path().join("out3").exists(), "partial outputs written");

    // Missing backend selection is a usage error (clap exits 2).
    let out = mitodet(&["run", "--roi", "roi.png", "--out-dir", "out4"], dir.path());
    assert_code(&out, 2);
}

#[test]
fn fuse_requires_provenance_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = mitodet(
        &[
            "plan-tiles",
            "--roi-width",
            "1120",
            "--roi-height",
            "640",
            "--out",
            "grid.json",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    std::fs::write(
        dir.path().join("dets.jsonl"),
        r#"{"roi_id":"roi","x_min":1.0,"y_min":1.0,"x_max":9.0,"y_max":9.0,"score":0.5,"label":"mitotic_figure"}
"#,
    )
    .unwrap();
    let out = mitodet(
        &[
            "fuse",
            "--dets",
            "dets.jsonl",
            "--grid",
            "grid.json",
            "--out",
            "fused.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 3);
}

#[test]
fn run_writes_resolved_config_that_replays() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::from_pixel(900, 700, Rgb([255; 3]))
        .save(dir.path().join("roi.png"))
        .unwrap();
    write_gt(&dir.path().join("gt.jsonl"), "roi", &[(450.0, 350.0), (120.0, 600.0)]);
    std::fs::write(
        dir.path().join("mock.json"),
        r#"{"position_jitter": 2.5, "false_positive_rate": 0.5}"#,
    )
    .unwrap();
    let base = [
        "run",
        "--roi",
        "roi.png",
        "--mock",
        "mock.json",
        "--gt",
        "gt.jsonl",
    ];

    let mut first = base.to_vec();
    first.extend(["--seed", "17", "--out-dir", "a"]);
    assert_code(&mitodet(&first, dir.path()), 0);

    // Re-running from the resolved config (which captured seed 17) matches.
    let mut replay = base.to_vec();
    replay.extend(["--config", "a/resolved_config.json", "--out-dir", "b"]);
    assert_code(&mitodet(&replay, dir.path()), 0);

    let a = std::fs::read(dir.path().join("a/fused.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/fused.jsonl")).unwrap();
    assert_eq!(a, b, "resolved config did not replay to the same result");

    let cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("a/resolved_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(cfg["seed"], serde_json::json!(17));
    assert_eq!(cfg["tile_size"], serde_json::json!(640));
    assert_eq!(cfg["support_T"], serde_json::json!(4));
}

#[test]
fn run_aggregates_multiple_rois() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::from_pixel(800, 700, Rgb([255; 3]))
        .save(dir.path().join("alpha.png"))
        .unwrap();
    RgbImage::from_pixel(700, 800, Rgb([255; 3]))
        .save(dir.path().join("beta.png"))
        .unwrap();
    let gt = r#"{"roi_id":"alpha","x":200.0,"y":200.0,"label":"mitotic_figure"}
{"roi_id":"alpha","x":600.0,"y":500.0,"label":"mitotic_figure"}
{"roi_id":"beta","x":350.0,"y":650.0,"label":"mitotic_figure"}
"#;
    std::fs::write(dir.path().join("gt.jsonl"), gt).unwrap();
    std::fs::write(dir.path().join("mock.json"), "{}").unwrap();
    let out = mitodet(
        &[
            "run",
            "--roi",
            "alpha.png",
            "--roi",
            "beta.png",
            "--mock",
            "mock.json",
            "--gt",
            "gt.jsonl",
            "--seed",
            "11",
            "--out-dir",
            "both",
            "--keep-intermediate",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let fused = std::fs::read_to_string(dir.path().join("both/fused.jsonl")).unwrap();
    let roi_ids: Vec<String> = fused
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["roi_id"]
            .as_str()
            .unwrap()
            .to_string())
        .collect();
    assert_eq!(roi_ids.iter().filter(|id| *id == "alpha").count(), 2);
    assert_eq!(roi_ids.iter().filter(|id| *id == "beta").count(), 1);

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("both/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);
    assert_eq!(report["pooled_f1"], serde_json::json!(1.0));
    assert_eq!(report["mean_f1"], serde_json::json!(1.0));

    // Per-ROI intermediates with suffixed names.
    for name in ["grid.alpha.json", "raw.alpha.jsonl", "grid.beta.json", "raw.beta.jsonl"] {
        assert!(dir.path().join("both").join(name).exists(), "missing {name}");
    }

    // --roi-id cannot disambiguate several inputs.
    let out = mitodet(
        &[
            "run",
            "--roi",
            "alpha.png",
            "--roi",
            "beta.png",
            "--roi-id",
            "x",
            "--mock",
            "mock.json",
            "--out-dir",
            "bad",
        ],
        dir.path(),
    );
    assert_code(&out, 2);
}

#[test]
fn gitignore_like_paths_are_not_special() {
    // Output paths with directories are created only for run's out-dir; other
    // subcommands write to existing locations and surface I/O errors.
    let dir = tempfile::tempdir().unwrap();
    let out = mitodet(
        &[
            "plan-tiles",
            "--roi-width",
            "100",
            "--roi-height",
            "100",
            "--out",
            "nested/does/not/exist.json",
        ],
        dir.path(),
    );
    assert_code(&out, 3);
}

#[test]
fn infer_accepts_tta_selection() {
    let dir = tempfile::tempdir().unwrap();
    RgbImage::from_pixel(640, 640, Rgb([255; 3]))
        .save(dir.path().join("roi.png"))
        .unwrap();
    write_gt(&dir.path().join("gt.jsonl"), "roi", &[(320.0, 320.0)]);
    std::fs::write(dir.path().join("mock.json"), "{}").unwrap();
    let out = mitodet(
        &[
            "infer",
            "--roi",
            "roi.png",
            "--mock",
            "mock.json",
            "--gt",
            "gt.jsonl",
            "--tta",
            "identity,hflip,vflip,hvflip",
            "--out",
            "dets.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    let text = std::fs::read_to_string(dir.path().join("dets.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4, "one detection per variant");

    // A set without identity is rejected.
    let out = mitodet(
        &[
            "infer",
            "--roi",
            "roi.png",
            "--mock",
            "mock.json",
            "--tta",
            "hflip",
            "--out",
            "dets2.jsonl",
        ],
        dir.path(),
    );
    assert_code(&out, 2);
}

#[test]
fn bin_path_sanity() {
    // Guards against the test harness resolving a stale binary.
    let path = PathBuf::from(env!("CARGO_BIN_EXE_mitodet"));
    assert!(path.exists());
}
