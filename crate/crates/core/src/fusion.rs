//! Test-time augmentation, per-patch NMS, Weighted Boxes Fusion and the
//! stitching stage that turns per-(tile, variant) detections into ROI-level
//! detections.
//!
//! Stitch order: per (tile, variant) NMS -> flip inversion -> remap to the
//! ROI frame -> clip -> global WBF per class -> confidence filter. The whole
//! stage is deterministic; input ordering never affects output.

use std::collections::BTreeMap;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::filter_by_confidence;
use crate::geom::{Detection, Label, PixelBox, Provenance, RoiSpec};
use crate::tiler::{remap_to_roi, TileError, TileSpec};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid TTA set: {0}")]
    InvalidTtaSet(&'static str),
    #[error("tile index {0} outside the grid")]
    UnknownTile(usize),
    #[error(transparent)]
    Frame(#[from] TileError),
}

/// Geometric test-time augmentation. Every variant is an involution.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum TtaVariant {
    Identity,
    HFlip,
    VFlip,
    HVFlip,
}

impl TtaVariant {
    pub const COUNT: usize = 4;

    pub fn all() -> [TtaVariant; 4] {
        [
            TtaVariant::Identity,
            TtaVariant::HFlip,
            TtaVariant::VFlip,
            TtaVariant::HVFlip,
        ]
    }

    /// Default active set; hvflip is opt-in.
    pub fn default_set() -> Vec<TtaVariant> {
        vec![TtaVariant::Identity, TtaVariant::HFlip, TtaVariant::VFlip]
    }

    pub fn index(self) -> usize {
        match self {
            TtaVariant::Identity => 0,
            TtaVariant::HFlip => 1,
            TtaVariant::VFlip => 2,
            TtaVariant::HVFlip => 3,
        }
    }

    /// Where a canonical-frame point lands in this variant's frame (and back:
    /// the map is its own inverse).
    pub fn transform_point(self, (x, y): (f64, f64), size: f64) -> (f64, f64) {
        match self {
            TtaVariant::Identity => (x, y),
            TtaVariant::HFlip => (size - x, y),
            TtaVariant::VFlip => (x, size - y),
            TtaVariant::HVFlip => (size - x, size - y),
        }
    }
}

impl std::fmt::Display for TtaVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TtaVariant::Identity => "identity",
            TtaVariant::HFlip => "hflip",
            TtaVariant::VFlip => "vflip",
            TtaVariant::HVFlip => "hvflip",
        })
    }
}

/// The active TTA set must contain identity and no duplicates.
pub fn validate_tta_set(set: &[TtaVariant]) -> Result<(), FusionError> {
    if !set.contains(&TtaVariant::Identity) {
        return Err(FusionError::InvalidTtaSet("set must contain identity"));
    }
    let mut seen = [false; TtaVariant::COUNT];
    for v in set {
        if seen[v.index()] {
            return Err(FusionError::InvalidTtaSet("duplicate variant"));
        }
        seen[v.index()] = true;
    }
    Ok(())
}

/// How a fused cluster's score is derived from its members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mean of member scores.
    Mean,
    /// Mean rescaled by `min(n, T) / T` where `T` is the expected number of
    /// sources per location.
    RescaleBySupport,
}

/// Thresholds of the fusion stage. Serialized field names are fixed
/// (`fusion.json`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub nms_iou: f64,
    pub wbf_iou: f64,
    pub score_mode: ScoreMode,
    #[serde(rename = "support_T")]
    pub support_t: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            wbf_iou: 0.55,
            score_mode: ScoreMode::Mean,
            support_t: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        for t in [self.nms_iou, self.wbf_iou] {
            if !(t > 0.0 && t < 1.0) {
                return Err(FusionError::InvalidConfig(
                    "iou thresholds must lie in (0, 1)",
                ));
            }
        }
        if self.support_t == 0 {
            return Err(FusionError::InvalidConfig("support_T must be at least 1"));
        }
        Ok(())
    }
}

/// Flip the tile pixels per variant; identity returns a copy of the input.
pub fn apply_tta(tile: &RgbImage, variant: TtaVariant) -> RgbImage {
    match variant {
        TtaVariant::Identity => tile.clone(),
        TtaVariant::HFlip => imageops::flip_horizontal(tile),
        TtaVariant::VFlip => imageops::flip_vertical(tile),
        TtaVariant::HVFlip => imageops::flip_vertical(&imageops::flip_horizontal(tile)),
    }
}

/// Map detections from a variant's frame back to the canonical tile frame.
/// Scores, labels and provenance are preserved; applying the same variant
/// twice is the identity.
pub fn invert_boxes(dets: &[Detection], variant: TtaVariant, tile_size: f64) -> Vec<Detection> {
    dets.iter()
        .map(|det| {
            let b = det.bbox();
            let (x_min, x_max) = match variant {
                TtaVariant::HFlip | TtaVariant::HVFlip => {
                    (tile_size - b.x_max(), tile_size - b.x_min())
                }
                _ => (b.x_min(), b.x_max()),
            };
            let (y_min, y_max) = match variant {
                TtaVariant::VFlip | TtaVariant::HVFlip => {
                    (tile_size - b.y_max(), tile_size - b.y_min())
                }
                _ => (b.y_min(), b.y_max()),
            };
            det.with_bbox(
                PixelBox::new(x_min, y_min, x_max, y_max)
                    .expect("flip preserves box validity"),
            )
        })
        .collect()
}

/// Deterministic ordering for all fusion stages: descending score, ties by
/// smaller (x_min, y_min).
fn fusion_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.bbox().x_min().total_cmp(&b.bbox().x_min()))
        .then(a.bbox().y_min().total_cmp(&b.bbox().y_min()))
}

/// Greedy non-maximum suppression: repeatedly keep the highest-score
/// remaining detection and discard the rest overlapping it with
/// `iou > iou_thresh`. Output sorted by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut ordered: Vec<Detection> = dets.to_vec();
    ordered.sort_by(fusion_order);
    let mut kept: Vec<Detection> = Vec::new();
    for det in ordered {
        if kept.iter().all(|k| k.bbox().iou(&det.bbox()) <= iou_thresh) {
            kept.push(det);
        }
    }
    kept
}

struct Cluster {
    fused: PixelBox,
    label: Label,
    score_sum: f64,
    weighted: [f64; 4],
    members: usize,
}

impl Cluster {
    fn start(det: &Detection) -> Self {
        let mut cluster = Self {
            fused: det.bbox(),
            label: det.label(),
            score_sum: 0.0,
            weighted: [0.0; 4],
            members: 0,
        };
        cluster.join(det);
        cluster
    }

    fn join(&mut self, det: &Detection) {
        let b = det.bbox();
        let s = det.score();
        self.score_sum += s;
        self.weighted[0] += s * b.x_min();
        self.weighted[1] += s * b.y_min();
        self.weighted[2] += s * b.x_max();
        self.weighted[3] += s * b.y_max();
        self.members += 1;
        self.fused = PixelBox::new(
            self.weighted[0] / self.score_sum,
            self.weighted[1] / self.score_sum,
            self.weighted[2] / self.score_sum,
            self.weighted[3] / self.score_sum,
        )
        .expect("confidence-weighted average of valid boxes is valid");
    }

    fn into_detection(self, mode: ScoreMode, support_t: usize) -> Detection {
        let mean = self.score_sum / self.members as f64;
        let score = match mode {
            ScoreMode::Mean => mean,
            ScoreMode::RescaleBySupport => {
                mean * (self.members.min(support_t) as f64 / support_t as f64)
            }
        };
        Detection::new(self.fused, score, self.label).expect("fused score stays in [0, 1]")
    }
}

/// Weighted Boxes Fusion: cluster detections in descending score order by
/// first-fit against the running fused boxes (`iou > iou_thresh`), with
/// cluster coordinates the confidence-weighted average of member
/// coordinates. Classes are fused independently.
pub fn wbf(
    dets: &[Detection],
    iou_thresh: f64,
    score_mode: ScoreMode,
    support_t: usize,
) -> Vec<Detection> {
    let mut ordered: Vec<Detection> = dets.to_vec();
    ordered.sort_by(fusion_order);
    let mut clusters: Vec<Cluster> = Vec::new();
    for det in &ordered {
        let slot = clusters
            .iter_mut()
            .find(|c| c.label == det.label() && c.fused.iou(&det.bbox()) > iou_thresh);
        match slot {
            Some(cluster) => cluster.join(det),
            None => clusters.push(Cluster::start(det)),
        }
    }
    let mut fused: Vec<Detection> = clusters
        .into_iter()
        .map(|c| c.into_detection(score_mode, support_t))
        .collect();
    fused.sort_by(fusion_order);
    fused
}

/// Fuse raw per-(tile, variant) detections into ROI-level detections.
///
/// Input boxes live in the frame of the augmented tile they were detected
/// on. Detections that clip to nothing inside the ROI (possible only in the
/// padding of undersized ROIs) are dropped.
pub fn stitch(
    per_tile: &BTreeMap<(usize, TtaVariant), Vec<Detection>>,
    grid: &[TileSpec],
    roi: &RoiSpec,
    cfg: &FusionConfig,
    confidence_threshold: f64,
) -> Result<Vec<Detection>, FusionError> {
    cfg.validate()?;
    let mut pooled: Vec<Detection> = Vec::new();
    for (&(tile_index, variant), dets) in per_tile {
        let tile = grid
            .get(tile_index)
            .ok_or(FusionError::UnknownTile(tile_index))?;
        let kept = nms(dets, cfg.nms_iou);
        for det in invert_boxes(&kept, variant, tile.size as f64) {
            let tagged = det.with_provenance(Provenance {
                tile_index,
                tta_variant: variant,
            });
            let remapped = remap_to_roi(&tagged, tile)?;
            if let Ok(clipped) = remapped.bbox().clip_to_roi(roi) {
                pooled.push(remapped.with_bbox(clipped));
            }
        }
    }
    let fused = wbf(&pooled, cfg.wbf_iou, cfg.score_mode, cfg.support_t);
    Ok(filter_by_confidence(&fused, confidence_threshold))
}
