//! End-to-end orchestration: tile -> (stain) -> TTA -> detect -> stitch ->
//! evaluate, with a bounded worker pool and deterministic merging.
//!
//! Per-tile random streams are keyed by tile index, and per-(tile, variant)
//! results are merged by key, so two runs with the same config and seed are
//! byte-identical regardless of worker count or completion order.

use std::collections::BTreeMap;
use std::path::PathBuf;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{DetectorBackend, MockBackend, MockParams, TileContext};
use crate::detect::BackendConcurrency;
use crate::eval::{aggregate, evaluate_image, EvalReport, MatchConfig};
use crate::fusion::{
    apply_tta, stitch, validate_tta_set, FusionConfig, ScoreMode, TtaVariant,
};
use crate::geom::{Annotation, Detection, Provenance, RoiSpec};
use crate::rng::{stream, StreamLabel};
use crate::stain::{stochastic_apply, StainBank};
use crate::tiler::{extract_tile, plan_grid, TileGridConfig, TileSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input/output error: {0}")]
    Io(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    /// Process exit code for the CLI: config 2, I/O 3, backend 4.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Io(_) => 3,
            PipelineError::Backend(_) => 4,
            PipelineError::Internal(_) => 1,
        }
    }
}

/// Fully resolved run configuration; a run writes this next to its outputs
/// so it can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tile_size: u32,
    pub stride: u32,
    pub nms_iou: f64,
    pub wbf_iou: f64,
    pub score_mode: ScoreMode,
    #[serde(rename = "support_T")]
    pub support_t: usize,
    pub tta: Vec<TtaVariant>,
    pub confidence_threshold: f64,
    pub stain_apply_probability: f64,
    pub seed: u64,
    pub mpp: f64,
    pub dist_thresh_um: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size: 640,
            stride: 480,
            nms_iou: 0.7,
            wbf_iou: 0.55,
            score_mode: ScoreMode::Mean,
            support_t: 4,
            tta: TtaVariant::default_set(),
            confidence_threshold: 0.25,
            stain_apply_probability: 0.25,
            seed: 0,
            mpp: 0.25,
            dist_thresh_um: 7.5,
        }
    }
}

impl PipelineConfig {
    pub fn tile_config(&self) -> TileGridConfig {
        TileGridConfig {
            tile_size: self.tile_size,
            stride: self.stride,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            nms_iou: self.nms_iou,
            wbf_iou: self.wbf_iou,
            score_mode: self.score_mode,
            support_t: self.support_t,
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            dist_thresh_um: self.dist_thresh_um,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let config = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.tile_config().validate().map_err(|e| config(&e))?;
        self.fusion_config().validate().map_err(|e| config(&e))?;
        validate_tta_set(&self.tta).map_err(|e| config(&e))?;
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(PipelineError::Config(
                "confidence_threshold must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.stain_apply_probability) {
            return Err(PipelineError::Config(
                "stain_apply_probability must lie in [0, 1]".into(),
            ));
        }
        if self.mpp.is_nan() || self.mpp <= 0.0 {
            return Err(PipelineError::Config("mpp must be positive".into()));
        }
        if self.dist_thresh_um.is_nan() || self.dist_thresh_um <= 0.0 {
            return Err(PipelineError::Config(
                "dist_thresh_um must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which detector drives the run.
#[derive(Debug, Clone)]
pub enum BackendSpec {
    Mock(MockParams),
    /// Path to an ONNX model file (requires the `onnx` cargo feature).
    Onnx(PathBuf),
}

fn build_backend(
    spec: &BackendSpec,
    grid: &[TileSpec],
    gt: Option<&[Annotation]>,
    cfg: &PipelineConfig,
    roi_seed: u64,
) -> Result<Box<dyn DetectorBackend>, PipelineError> {
    match spec {
        BackendSpec::Mock(params) => Ok(Box::new(MockBackend::from_roi_annotations(
            grid,
            gt.unwrap_or(&[]),
            cfg.tile_size,
            *params,
            roi_seed,
        ))),
        #[cfg(feature = "onnx")]
        BackendSpec::Onnx(path) => {
            let backend = crate::detect::OnnxBackend::load(path, cfg.tile_size, 0.01)
                .map_err(|e| PipelineError::Backend(e.to_string()))?;
            Ok(Box::new(backend))
        }
        #[cfg(not(feature = "onnx"))]
        BackendSpec::Onnx(_) => Err(PipelineError::Backend(
            crate::detect::DetectError::OnnxUnavailable.to_string(),
        )),
    }
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub grid: Vec<TileSpec>,
    /// Raw detections per (tile, variant), in the augmented tile frame.
    pub raw: BTreeMap<(usize, TtaVariant), Vec<Detection>>,
    pub fused: Vec<Detection>,
    /// Present when ground truth was supplied.
    pub report: Option<EvalReport>,
}

type TileResult = Result<Vec<((usize, TtaVariant), Vec<Detection>)>, PipelineError>;

/// Run the full pipeline over one ROI image.
///
/// `threads = 0` uses all available cores; backends declaring
/// single-threaded mode are processed sequentially regardless.
pub fn run_pipeline(
    image: &RgbImage,
    roi: &RoiSpec,
    gt: Option<&[Annotation]>,
    cfg: &PipelineConfig,
    backend_spec: &BackendSpec,
    bank: Option<&StainBank>,
    threads: usize,
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    if image.dimensions() != (roi.width_px, roi.height_px) {
        return Err(PipelineError::Config(format!(
            "image is {:?} but the ROI spec says {}x{}",
            image.dimensions(),
            roi.width_px,
            roi.height_px
        )));
    }
    let grid = plan_grid(roi, &cfg.tile_config())
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    // Each ROI draws from its own family of streams under the root seed.
    let roi_seed = crate::rng::roi_seed(cfg.seed, &roi.id);
    let backend = build_backend(backend_spec, &grid, gt, cfg, roi_seed)?;
    // The run config owns the apply probability; the bank supplies profiles.
    let bank = bank
        .map(|b| {
            b.clone()
                .with_apply_probability(cfg.stain_apply_probability)
                .map_err(|e| PipelineError::Config(e.to_string()))
        })
        .transpose()?;

    let process_tile = |tile_index: usize| -> TileResult {
        let tile = &grid[tile_index];
        let mut pixels = extract_tile(image, tile);
        if let Some(bank) = &bank {
            let mut rng = stream(roi_seed, StreamLabel::StainApply, tile_index as u64);
            pixels = stochastic_apply(&pixels, bank, &mut rng).0;
        }
        let mut out = Vec::with_capacity(cfg.tta.len());
        for &variant in &cfg.tta {
            let augmented = apply_tta(&pixels, variant);
            let ctx = TileContext {
                tile_index,
                variant,
            };
            let dets = backend
                .detect(&augmented, ctx)
                .map_err(|e| PipelineError::Backend(e.to_string()))?;
            let tagged = dets
                .into_iter()
                .map(|d| {
                    d.with_provenance(Provenance {
                        tile_index,
                        tta_variant: variant,
                    })
                })
                .collect();
            out.push(((tile_index, variant), tagged));
        }
        Ok(out)
    };

    let results: Vec<TileResult> =
        if backend.concurrency() == BackendConcurrency::SingleThreaded || threads == 1 {
            (0..grid.len()).map(process_tile).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| PipelineError::Internal(e.to_string()))?;
            pool.install(|| (0..grid.len()).into_par_iter().map(process_tile).collect())
        };

    let mut raw = BTreeMap::new();
    for tile_result in results {
        for (key, dets) in tile_result? {
            raw.insert(key, dets);
        }
    }

    let fused = stitch(
        &raw,
        &grid,
        roi,
        &cfg.fusion_config(),
        cfg.confidence_threshold,
    )
    .map_err(|e| PipelineError::Internal(e.to_string()))?;

    let report = gt
        .map(|gts| {
            let threshold_px = cfg.match_config().threshold_px(roi.mpp);
            let image_eval = evaluate_image(&roi.id, &fused, gts, threshold_px);
            aggregate(vec![image_eval]).map_err(|e| PipelineError::Internal(e.to_string()))
        })
        .transpose()?;

    Ok(RunOutput {
        grid,
        raw,
        fused,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Label;
    use image::Rgb;

    fn white_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([255; 3]))
    }

    fn planted() -> Vec<Annotation> {
        // Includes points in multi-tile overlap zones of a 2000x1500 grid
        // (columns 0/480/960/1360, rows 0/480/860).
        vec![
            Annotation::new(100.0, 100.0, Label::MitoticFigure),
            Annotation::new(1400.0, 900.0, Label::MitoticFigure),
            Annotation::new(500.0, 500.0, Label::MitoticFigure),
            Annotation::new(1000.0, 900.0, Label::MitoticFigure),
            Annotation::new(1900.0, 1400.0, Label::MitoticFigure),
        ]
    }

    #[test]
    fn perfect_mock_end_to_end_finds_everything() {
        let roi = RoiSpec::new("synthetic", 2000, 1500).unwrap();
        let image = white_image(2000, 1500);
        let gt = planted();
        let cfg = PipelineConfig {
            confidence_threshold: 0.25,
            ..PipelineConfig::default()
        };
        let out = run_pipeline(
            &image,
            &roi,
            Some(&gt),
            &cfg,
            &BackendSpec::Mock(MockParams::default()),
            None,
            2,
        )
        .unwrap();
        assert_eq!(out.fused.len(), gt.len());
        for ann in &gt {
            let hit = out
                .fused
                .iter()
                .any(|d| d.bbox().center_distance(ann.center) <= 2.0);
            assert!(hit, "no detection within 2 px of {:?}", ann.center);
        }
        let report = out.report.unwrap();
        assert_eq!(report.pooled_f1, 1.0);
    }

    #[test]
    fn empty_roi_yields_no_detections() {
        let roi = RoiSpec::new("blank", 800, 600).unwrap();
        let out = run_pipeline(
            &white_image(800, 600),
            &roi,
            None,
            &PipelineConfig::default(),
            &BackendSpec::Mock(MockParams::default()),
            None,
            1,
        )
        .unwrap();
        assert!(out.fused.is_empty());
        assert!(out.report.is_none());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let roi = RoiSpec::new("synthetic", 2000, 1500).unwrap();
        let image = white_image(2000, 1500);
        let gt = planted();
        let params = MockParams {
            position_jitter: 4.0,
            score_jitter: 0.05,
            false_positive_rate: 1.5,
            ..MockParams::default()
        };
        let cfg = PipelineConfig {
            seed: 41,
            ..PipelineConfig::default()
        };
        let run = |threads| {
            run_pipeline(
                &image,
                &roi,
                Some(&gt),
                &cfg,
                &BackendSpec::Mock(params),
                None,
                threads,
            )
            .unwrap()
        };
        let (a, b) = (run(1), run(8));
        assert_eq!(a.fused, b.fused);
        assert_eq!(a.raw, b.raw);
    }

    #[test]
    fn stain_bank_path_is_deterministic_across_threads() {
        use crate::stain::{build_bank, tests_support};

        let inputs = tests_support::bank_inputs(3);
        let bank = build_bank(&inputs, 3).unwrap();
        // Mixed content: tissue region on a white background, so some tiles
        // fit a profile and background tiles pass through unchanged.
        let mut image = white_image(1200, 700);
        let tissue = tests_support::tissue_patch(400, 300);
        image::imageops::overlay(&mut image, &tissue, 100, 150);
        let roi = RoiSpec::new("stained", 1200, 700).unwrap();
        let gt = vec![Annotation::new(300.0, 300.0, Label::MitoticFigure)];
        let cfg = PipelineConfig {
            seed: 31,
            stain_apply_probability: 1.0,
            ..PipelineConfig::default()
        };
        let run = |threads| {
            run_pipeline(
                &image,
                &roi,
                Some(&gt),
                &cfg,
                &BackendSpec::Mock(MockParams::default()),
                Some(&bank),
                threads,
            )
            .unwrap()
        };
        let (a, b) = (run(4), run(1));
        assert_eq!(a.fused, b.fused);
        assert_eq!(a.report.unwrap().pooled_f1, 1.0);
    }

    #[test]
    fn mismatched_roi_spec_is_config_error() {
        let roi = RoiSpec::new("r", 100, 100).unwrap();
        let err = run_pipeline(
            &white_image(80, 100),
            &roi,
            None,
            &PipelineConfig::default(),
            &BackendSpec::Mock(MockParams::default()),
            None,
            1,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[cfg(not(feature = "onnx"))]
    #[test]
    fn onnx_without_feature_is_backend_error() {
        let roi = RoiSpec::new("r", 640, 640).unwrap();
        let err = run_pipeline(
            &white_image(640, 640),
            &roi,
            None,
            &PipelineConfig::default(),
            &BackendSpec::Onnx(PathBuf::from("missing.onnx")),
            None,
            1,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"support_T\":4"));
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
