//! Distance-matched detection evaluation: greedy center-distance matching,
//! precision/recall/F1, average precision, and per-image plus pooled
//! aggregation.
//!
//! Ground truth is point-like, so matching uses center distance (default
//! 7.5 um, i.e. 30 px at 0.25 um/px) rather than IoU. Both the unweighted
//! mean over images and metrics pooled from summed counts are reported,
//! because the two disagree whenever images carry different ground-truth
//! counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Annotation, Detection, Label};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("at least one image is required")]
    NoImages,
}

/// Matching radius in microns; resolve to pixels with the ROI's scan
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub dist_thresh_um: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { dist_thresh_um: 7.5 }
    }
}

impl MatchConfig {
    pub fn threshold_px(&self, mpp: f64) -> f64 {
        self.dist_thresh_um / mpp
    }
}

/// Outcome of matching one image's predictions against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub false_negatives: usize,
    /// `(prediction index, ground-truth index)` pairs, one-to-one.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching in descending score order: each prediction
/// takes the nearest unmatched ground truth within `threshold_px` (ties on
/// distance go to the earlier ground-truth index).
///
/// Only mitotic-figure predictions and annotations participate; indices in
/// `pairs` refer to positions in the input slices.
pub fn match_detections(
    preds: &[Detection],
    gts: &[Annotation],
    threshold_px: f64,
) -> MatchResult {
    let mitotic_preds: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].label() == Label::MitoticFigure)
        .collect();
    let mitotic_gts: Vec<usize> = (0..gts.len())
        .filter(|&i| gts[i].label == Label::MitoticFigure)
        .collect();

    let mut order = mitotic_preds.clone();
    order.sort_by(|&a, &b| preds[b].score().total_cmp(&preds[a].score()));

    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for &pred_idx in &order {
        let mut best: Option<(f64, usize)> = None;
        for &gt_idx in &mitotic_gts {
            if gt_taken[gt_idx] {
                continue;
            }
            let d = preds[pred_idx].bbox().center_distance(gts[gt_idx].center);
            if d <= threshold_px && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, gt_idx));
            }
        }
        if let Some((_, gt_idx)) = best {
            gt_taken[gt_idx] = true;
            pairs.push((pred_idx, gt_idx));
        }
    }

    let tp = pairs.len();
    MatchResult {
        tp,
        fp: mitotic_preds.len() - tp,
        false_negatives: mitotic_gts.len() - tp,
        pairs,
    }
}

/// Precision, recall, F1 from counts. Degenerate `0/0` ratios are 0, except
/// the vacuous case `tp = fp = fn = 0` which scores perfect `(1, 1, 1)`.
pub fn prf(tp: usize, fp: usize, false_negatives: usize) -> (f64, f64, f64) {
    if tp == 0 && fp == 0 && false_negatives == 0 {
        return (1.0, 1.0, 1.0);
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + false_negatives);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Area under the pooled precision-recall curve, sweeping every distinct
/// prediction score as a cutoff and making precision monotonically
/// non-increasing from the right (all-point interpolation).
///
/// Matching is recomputed per image at every cutoff. With zero ground truths
/// AP is undefined and reported as `None`.
pub fn average_precision(
    images: &[(&[Detection], &[Annotation])],
    threshold_px: f64,
) -> Option<f64> {
    let total_gt: usize = images
        .iter()
        .map(|(_, gts)| {
            gts.iter()
                .filter(|g| g.label == Label::MitoticFigure)
                .count()
        })
        .sum();
    if total_gt == 0 {
        return None;
    }

    let mut cutoffs: Vec<f64> = images
        .iter()
        .flat_map(|(preds, _)| preds.iter())
        .filter(|d| d.label() == Label::MitoticFigure)
        .map(Detection::score)
        .collect();
    cutoffs.sort_by(|a, b| b.total_cmp(a));
    cutoffs.dedup();
    if cutoffs.is_empty() {
        return Some(0.0);
    }

    let mut points = Vec::with_capacity(cutoffs.len());
    for &cutoff in &cutoffs {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (preds, gts) in images {
            let sub: Vec<Detection> = preds
                .iter()
                .filter(|d| d.score() >= cutoff)
                .copied()
                .collect();
            let m = match_detections(&sub, gts, threshold_px);
            tp += m.tp;
            fp += m.fp;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_gt as f64;
        points.push((recall, precision));
    }

    for i in (0..points.len() - 1).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Per-image counts and rates. Serialized field names are fixed
/// (`report.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub roi_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap: Option<f64>,
}

/// Match, score and AP one image.
pub fn evaluate_image(
    roi_id: &str,
    preds: &[Detection],
    gts: &[Annotation],
    threshold_px: f64,
) -> ImageEval {
    let m = match_detections(preds, gts, threshold_px);
    let (precision, recall, f1) = prf(m.tp, m.fp, m.false_negatives);
    ImageEval {
        roi_id: roi_id.to_string(),
        tp: m.tp,
        fp: m.fp,
        false_negatives: m.false_negatives,
        precision,
        recall,
        f1,
        ap: average_precision(&[(preds, gts)], threshold_px),
    }
}

/// Dataset-level report: unweighted per-image means alongside metrics pooled
/// from summed counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    pub mean_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_ap: Option<f64>,
    pub pooled_precision: f64,
    pub pooled_recall: f64,
    pub pooled_f1: f64,
}

pub fn aggregate(per_image: Vec<ImageEval>) -> Result<EvalReport, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::NoImages);
    }
    let n = per_image.len() as f64;
    let mean_f1 = per_image.iter().map(|i| i.f1).sum::<f64>() / n;
    let aps: Vec<f64> = per_image.iter().filter_map(|i| i.ap).collect();
    let mean_ap = if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    };
    let tp: usize = per_image.iter().map(|i| i.tp).sum();
    let fp: usize = per_image.iter().map(|i| i.fp).sum();
    let false_negatives: usize = per_image.iter().map(|i| i.false_negatives).sum();
    let (pooled_precision, pooled_recall, pooled_f1) = prf(tp, fp, false_negatives);
    Ok(EvalReport {
        per_image,
        mean_f1,
        mean_ap,
        pooled_precision,
        pooled_recall,
        pooled_f1,
    })
}
