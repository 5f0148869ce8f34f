//! Detector backend contract, a deterministic mock for pipeline testing, and
//! an optional ONNX adapter for real models (`onnx` cargo feature).
//!
//! A backend maps tile pixels to tile-local detections with scores in
//! `[0, 1]`. Boxes must stay within `[0, tile_size]^2` and output must be
//! deterministic for fixed backend state and input. The mock satisfies the
//! contract without any model: it replays ground-truth annotations with
//! seeded jitter plus Poisson false positives, which is enough to exercise
//! every downstream stage.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::TtaVariant;
use crate::geom::{Annotation, Detection, Label, PixelBox};
use crate::rng::{stream, StreamLabel};
use crate::tiler::{assign_annotations, TileSpec};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("backend contract violation: {0}")]
    ContractViolation(String),
    #[error("model load failed: {0}")]
    ModelLoad(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("unsupported model output layout: {0}")]
    OutputLayout(String),
    #[error("onnx support not compiled in; rebuild with the `onnx` feature")]
    OnnxUnavailable,
}

/// Which (tile, TTA variant) evaluation a detect call belongs to.
///
/// Real backends only look at the pixels; the mock needs the context to
/// present its ground truth the way a pixel-reading detector would see it
/// under the given flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileContext {
    pub tile_index: usize,
    pub variant: TtaVariant,
}

impl TileContext {
    fn stream_index(&self) -> u64 {
        self.tile_index as u64 * TtaVariant::COUNT as u64 + self.variant.index() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendConcurrency {
    /// Safe for concurrent detect calls on distinct tiles.
    Concurrent,
    /// The pipeline serializes access through a single worker.
    SingleThreaded,
}

/// The contract any detector (mock or neural) satisfies: tile pixels in,
/// tile-local detections out.
pub trait DetectorBackend: Send + Sync {
    fn tile_size(&self) -> u32;

    fn detect(&self, pixels: &RgbImage, ctx: TileContext) -> Result<Vec<Detection>, DetectError>;

    fn concurrency(&self) -> BackendConcurrency {
        BackendConcurrency::Concurrent
    }
}

/// Scalar knobs of the mock backend (the per-tile ground truth is supplied
/// separately). Serializable so CLI runs can pin a mock in a JSON file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockParams {
    /// Side length of emitted boxes, px.
    pub box_size: f64,
    /// Mean of the clipped-normal score distribution for true detections.
    pub score_mean: f64,
    /// Standard deviation of the score distribution (0 = exact mean).
    pub score_jitter: f64,
    /// Standard deviation of the center position error, px (0 = exact).
    pub position_jitter: f64,
    /// Poisson mean of spurious detections per (tile, variant) evaluation.
    pub false_positive_rate: f64,
    /// Mean score of spurious detections; kept below `score_mean` so a
    /// confidence threshold can separate the two populations.
    pub fp_score_mean: f64,
    /// Overrides the run's root seed when set.
    pub seed: Option<u64>,
}

impl Default for MockParams {
    fn default() -> Self {
        Self {
            box_size: 50.0,
            score_mean: 0.9,
            score_jitter: 0.0,
            position_jitter: 0.0,
            false_positive_rate: 0.0,
            fp_score_mean: 0.3,
            seed: None,
        }
    }
}

/// Deterministic test double: emits one detection per ground-truth annotation
/// of its tile (seeded jitter) plus Poisson false positives.
pub struct MockBackend {
    per_tile: Vec<Vec<Annotation>>,
    tile_size: u32,
    params: MockParams,
    seed: u64,
}

impl MockBackend {
    pub fn new(
        per_tile: Vec<Vec<Annotation>>,
        tile_size: u32,
        params: MockParams,
        root_seed: u64,
    ) -> Self {
        let seed = params.seed.unwrap_or(root_seed);
        Self {
            per_tile,
            tile_size,
            params,
            seed,
        }
    }

    /// Build the per-tile ground truth by assigning ROI-frame annotations to
    /// the grid.
    pub fn from_roi_annotations(
        grid: &[TileSpec],
        annotations: &[Annotation],
        tile_size: u32,
        params: MockParams,
        root_seed: u64,
    ) -> Self {
        let per_tile = assign_annotations(grid, annotations)
            .into_iter()
            .map(|t| t.annotations)
            .collect();
        Self::new(per_tile, tile_size, params, root_seed)
    }

    /// Box of the configured size centered at `(cx, cy)`, clipped at the tile
    /// border like a real detector's output; `None` when the center leaves
    /// the tile.
    fn make_box(&self, cx: f64, cy: f64) -> Option<PixelBox> {
        let s = self.tile_size as f64;
        let half = self.params.box_size.min(s) / 2.0;
        PixelBox::new(
            (cx - half).max(0.0),
            (cy - half).max(0.0),
            (cx + half).min(s),
            (cy + half).min(s),
        )
        .ok()
    }

    fn draw_score(&self, mean: f64, rng: &mut impl Rng) -> f64 {
        if self.params.score_jitter > 0.0 {
            let normal = Normal::new(mean, self.params.score_jitter)
                .expect("positive jitter builds a normal");
            normal.sample(rng).clamp(0.0, 1.0)
        } else {
            mean.clamp(0.0, 1.0)
        }
    }
}

impl DetectorBackend for MockBackend {
    fn tile_size(&self) -> u32 {
        self.tile_size
    }

    fn detect(&self, _pixels: &RgbImage, ctx: TileContext) -> Result<Vec<Detection>, DetectError> {
        let mut rng = stream(self.seed, StreamLabel::MockDetector, ctx.stream_index());
        let size = self.tile_size as f64;
        let annotations = self.per_tile.get(ctx.tile_index).ok_or_else(|| {
            DetectError::Inference(format!(
                "tile index {} outside the configured grid of {} tiles",
                ctx.tile_index,
                self.per_tile.len()
            ))
        })?;

        let mut out = Vec::new();
        for ann in annotations {
            // The detector sees flipped pixels, so its output lives in the
            // variant frame; stitching inverts it back.
            let (mut cx, mut cy) = ctx.variant.transform_point(ann.center, size);
            if self.params.position_jitter > 0.0 {
                let normal = Normal::new(0.0, self.params.position_jitter)
                    .expect("positive jitter builds a normal");
                cx += normal.sample(&mut rng);
                cy += normal.sample(&mut rng);
            }
            // A center jittered out of the tile is a missed detection.
            let Some(bbox) = self.make_box(cx, cy) else {
                continue;
            };
            let score = self.draw_score(self.params.score_mean, &mut rng);
            out.push(Detection::new(bbox, score, ann.label).expect("clamped score is valid"));
        }

        if self.params.false_positive_rate > 0.0 {
            let poisson = Poisson::new(self.params.false_positive_rate)
                .expect("positive rate builds a poisson");
            let count = poisson.sample(&mut rng) as usize;
            for _ in 0..count {
                let cx = rng.random_range(0.0..size);
                let cy = rng.random_range(0.0..size);
                let Some(bbox) = self.make_box(cx, cy) else {
                    continue;
                };
                let score = self.draw_score(self.params.fp_score_mean, &mut rng);
                out.push(
                    Detection::new(bbox, score, Label::MitoticFigure)
                        .expect("clamped score is valid"),
                );
            }
        }
        Ok(out)
    }
}

/// Keep mitotic-figure detections scoring at least `threshold`; hard
/// negatives are always dropped: they occupy the detector and are never
/// reported.
pub fn filter_by_confidence(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.label() == Label::MitoticFigure && d.score() >= threshold)
        .copied()
        .collect()
}

/// Run one detect call twice and check the backend contract: in-bounds boxes,
/// scores in range, determinism.
pub fn verify_backend_contract(
    backend: &dyn DetectorBackend,
    pixels: &RgbImage,
    ctx: TileContext,
) -> Result<Vec<Detection>, DetectError> {
    let first = backend.detect(pixels, ctx)?;
    let second = backend.detect(pixels, ctx)?;
    if first != second {
        return Err(DetectError::ContractViolation(
            "repeated detect calls disagree".into(),
        ));
    }
    let s = backend.tile_size() as f64;
    for det in &first {
        let b = det.bbox();
        if b.x_min() < 0.0 || b.y_min() < 0.0 || b.x_max() > s || b.y_max() > s {
            return Err(DetectError::ContractViolation(format!(
                "box [{}, {}, {}, {}] escapes the {s} px tile",
                b.x_min(),
                b.y_min(),
                b.x_max(),
                b.y_max()
            )));
        }
        if !(0.0..=1.0).contains(&det.score()) {
            return Err(DetectError::ContractViolation(format!(
                "score {} outside [0, 1]",
                det.score()
            )));
        }
    }
    Ok(first)
}

/// Parse detector output rows `(x_center, y_center, w, h, class scores...)`
/// in tile pixels into detections.
///
/// Class order is mitotic figure, then hard negative; rows scoring below
/// `min_score` or collapsing to zero area after clamping are dropped.
pub fn parse_detector_rows(
    data: &[f32],
    rows: usize,
    cols: usize,
    tile_size: u32,
    min_score: f64,
) -> Result<Vec<Detection>, DetectError> {
    if !(5..=6).contains(&cols) {
        return Err(DetectError::OutputLayout(format!(
            "expected rows of 4 coordinates plus 1-2 class scores, got {cols} columns"
        )));
    }
    if data.len() != rows * cols {
        return Err(DetectError::OutputLayout(format!(
            "buffer holds {} values, expected {rows} x {cols}",
            data.len()
        )));
    }
    let s = tile_size as f64;
    let mut out = Vec::new();
    for row in data.chunks_exact(cols) {
        let (cx, cy, w, h) = (
            row[0] as f64,
            row[1] as f64,
            row[2] as f64,
            row[3] as f64,
        );
        let (score, label) = row[4..]
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let label = if i == 0 {
                    Label::MitoticFigure
                } else {
                    Label::HardNegative
                };
                (v as f64, label)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least one class column");
        let score = score.clamp(0.0, 1.0);
        if score < min_score {
            continue;
        }
        let x_min = (cx - w / 2.0).clamp(0.0, s);
        let y_min = (cy - h / 2.0).clamp(0.0, s);
        let x_max = (cx + w / 2.0).clamp(0.0, s);
        let y_max = (cy + h / 2.0).clamp(0.0, s);
        let Ok(bbox) = PixelBox::new(x_min, y_min, x_max, y_max) else {
            continue;
        };
        out.push(Detection::new(bbox, score, label).expect("clamped score is valid"));
    }
    Ok(out)
}

#[cfg(feature = "onnx")]
mod onnx {
    use std::path::Path;

    use tract_onnx::prelude::*;

    use super::*;

    type RunnableOnnx = Arc<TypedSimplePlan>;

    /// Adapter for a detector exported to ONNX.
    ///
    /// Input layout `1x3xSxS`, RGB scaled to `[0, 1]`; output rows
    /// `(x_center, y_center, w, h, class scores)`, accepted either as
    /// `[1, N, C]` or channel-first `[1, C, N]`.
    pub struct OnnxBackend {
        plan: RunnableOnnx,
        tile_size: u32,
        min_score: f64,
    }

    impl OnnxBackend {
        pub fn load(path: &Path, tile_size: u32, min_score: f64) -> Result<Self, DetectError> {
            let s = tile_size as i64;
            let plan = tract_onnx::onnx()
                .model_for_path(path)
                .and_then(|m| {
                    m.with_input_fact(0, f32::fact([1, 3, s, s]).into())?
                        .into_optimized()?
                        .into_runnable()
                })
                .map_err(|e| DetectError::ModelLoad(format!("{path:?}: {e}")))?;
            Ok(Self {
                plan,
                tile_size,
                min_score,
            })
        }
    }

    impl DetectorBackend for OnnxBackend {
        fn tile_size(&self) -> u32 {
            self.tile_size
        }

        fn detect(
            &self,
            pixels: &RgbImage,
            _ctx: TileContext,
        ) -> Result<Vec<Detection>, DetectError> {
            let s = self.tile_size as usize;
            if pixels.dimensions() != (self.tile_size, self.tile_size) {
                return Err(DetectError::Inference(format!(
                    "tile is {:?}, model expects {s}x{s}",
                    pixels.dimensions()
                )));
            }
            let input = tract_ndarray::Array4::from_shape_fn((1, 3, s, s), |(_, c, y, x)| {
                pixels.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            });
            let outputs = self
                .plan
                .run(tvec!(Tensor::from(input).into()))
                .map_err(|e| DetectError::Inference(e.to_string()))?;
            let tensor = outputs[0]
                .to_plain_array_view::<f32>()
                .map_err(|e| DetectError::Inference(e.to_string()))?;
            let shape = tensor.shape().to_vec();
            let squeezed = match shape.as_slice() {
                [1, a, b] => tensor
                    .to_shape((*a, *b))
                    .map_err(|e| DetectError::OutputLayout(e.to_string()))?
                    .to_owned(),
                [a, b] => tensor
                    .to_shape((*a, *b))
                    .map_err(|e| DetectError::OutputLayout(e.to_string()))?
                    .to_owned(),
                other => {
                    return Err(DetectError::OutputLayout(format!(
                        "expected a 2-D (plus batch) output, got shape {other:?}"
                    )))
                }
            };
            // Channel-first exports put the short axis (4 + classes) first.
            let (rows, cols) = squeezed.dim();
            let row_major = if cols > 6 && rows <= 6 {
                squeezed.t().to_owned()
            } else {
                squeezed
            };
            let (rows, cols) = row_major.dim();
            let data: Vec<f32> = row_major.iter().copied().collect();
            parse_detector_rows(&data, rows, cols, self.tile_size, self.min_score)
        }
    }
}

#[cfg(feature = "onnx")]
pub use onnx::OnnxBackend;
