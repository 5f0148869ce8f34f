//! Line-oriented JSON interchange records.
//!
//! Detection record: `{roi_id, x_min, y_min, x_max, y_max, score, label}`.
//! Annotation record: `{roi_id, x, y, label}`. Field names are fixed.
//! Intermediate (pre-fusion) detection records additionally carry optional
//! `tile` and `tta` provenance fields so the fuse stage can group them; final
//! outputs omit both.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::TtaVariant;
use crate::geom::{Annotation, Detection, GeomError, Label, PixelBox, Provenance};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: GeomError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub roi_id: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tile: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tta: Option<TtaVariant>,
}

impl DetectionRecord {
    pub fn from_detection(roi_id: &str, det: &Detection) -> Self {
        let b = det.bbox();
        Self {
            roi_id: roi_id.to_string(),
            x_min: b.x_min(),
            y_min: b.y_min(),
            x_max: b.x_max(),
            y_max: b.y_max(),
            score: det.score(),
            label: det.label(),
            tile: det.provenance().map(|p| p.tile_index),
            tta: det.provenance().map(|p| p.tta_variant),
        }
    }

    pub fn to_detection(&self) -> Result<Detection, GeomError> {
        let bbox = PixelBox::new(self.x_min, self.y_min, self.x_max, self.y_max)?;
        let det = Detection::new(bbox, self.score, self.label)?;
        Ok(match (self.tile, self.tta) {
            (Some(tile_index), Some(tta_variant)) => det.with_provenance(Provenance {
                tile_index,
                tta_variant,
            }),
            _ => det,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub roi_id: String,
    pub x: f64,
    pub y: f64,
    pub label: Label,
}

impl AnnotationRecord {
    pub fn from_annotation(roi_id: &str, ann: &Annotation) -> Self {
        Self {
            roi_id: roi_id.to_string(),
            x: ann.center.0,
            y: ann.center.1,
            label: ann.label,
        }
    }

    pub fn to_annotation(&self) -> Annotation {
        Annotation::new(self.x, self.y, self.label)
    }
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, records: &[T]) -> Result<(), RecordError> {
    for record in records {
        let line = serde_json::to_string(record).expect("record serialization cannot fail");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| RecordError::Parse {
            line: idx + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Parse detection records into `Detection`s grouped with their ROI ids.
pub fn detections_from_records(
    records: &[DetectionRecord],
) -> Result<Vec<(String, Detection)>, RecordError> {
    records
        .iter()
        .enumerate()
        .map(|(idx, rec)| {
            rec.to_detection()
                .map(|det| (rec.roi_id.clone(), det))
                .map_err(|source| RecordError::Invalid {
                    line: idx + 1,
                    source,
                })
        })
        .collect()
}
