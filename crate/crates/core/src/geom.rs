//! Detection geometry: boxes, labels, ROI descriptors and elementary box math.
//!
//! Everything here is an immutable value type, safe to share across workers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::TtaVariant;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("box [{0}, {1}, {2}, {3}] lies fully outside the ROI")]
    BoxOutsideRoi(f64, f64, f64, f64),
    #[error("invalid ROI spec: {0}")]
    InvalidRoi(&'static str),
}

/// Axis-aligned box in pixel coordinates (tile-local or ROI frame).
///
/// Construction rejects non-finite and zero- or negative-area boxes, so every
/// `PixelBox` in flight has `x_min < x_max`, `y_min < y_max` and a positive
/// area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeomError> {
        let invalid = |reason| GeomError::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(invalid("extent must be positive on both axes"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box of size `size` centered at `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, size: f64) -> Result<Self, GeomError> {
        let half = size / 2.0;
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeomError> {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    /// Intersection-over-union with `other`; 0 when disjoint.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Euclidean distance between the box center and `point`, in pixels.
    pub fn center_distance(&self, point: (f64, f64)) -> f64 {
        let (cx, cy) = self.center();
        ((cx - point.0).powi(2) + (cy - point.1).powi(2)).sqrt()
    }

    /// Clamp into `[0, width_px] x [0, height_px]`.
    ///
    /// Boxes without positive-area overlap with the ROI rectangle are
    /// rejected rather than collapsed to degenerate boxes.
    pub fn clip_to_roi(&self, roi: &RoiSpec) -> Result<PixelBox, GeomError> {
        let w = roi.width_px as f64;
        let h = roi.height_px as f64;
        let x_min = self.x_min.clamp(0.0, w);
        let y_min = self.y_min.clamp(0.0, h);
        let x_max = self.x_max.clamp(0.0, w);
        let y_max = self.y_max.clamp(0.0, h);
        if x_min >= x_max || y_min >= y_max {
            return Err(GeomError::BoxOutsideRoi(
                self.x_min, self.y_min, self.x_max, self.y_max,
            ));
        }
        PixelBox::new(x_min, y_min, x_max, y_max)
    }
}

/// Output space of the detector: mitotic figures are reported, hard negatives
/// exist only to occupy the detector and never appear in pipeline output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    MitoticFigure,
    HardNegative,
}

/// Species tag used by the domain-balanced batch sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Human,
    Canine,
}

/// Where a detection came from: which tile of the grid and under which
/// test-time augmentation it was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tile_index: usize,
    pub tta_variant: TtaVariant,
}

/// A scored, labeled box. The currency of the whole pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    bbox: PixelBox,
    score: f64,
    label: Label,
    provenance: Option<Provenance>,
}

impl Detection {
    pub fn new(bbox: PixelBox, score: f64, label: Label) -> Result<Self, GeomError> {
        if !(0.0..=1.0).contains(&score) || !score.is_finite() {
            return Err(GeomError::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            score,
            label,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn bbox(&self) -> PixelBox {
        self.bbox
    }
    pub fn score(&self) -> f64 {
        self.score
    }
    pub fn label(&self) -> Label {
        self.label
    }
    pub fn provenance(&self) -> Option<Provenance> {
        self.provenance
    }

    /// Same detection with the box replaced; score/label/provenance kept.
    pub fn with_bbox(&self, bbox: PixelBox) -> Self {
        Self { bbox, ..*self }
    }
}

/// One region of interest: a plain raster crop of a slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub id: String,
    pub width_px: u32,
    pub height_px: u32,
    /// Microns per pixel.
    pub mpp: f64,
    pub domain: Domain,
    pub tumor_type: String,
}

impl RoiSpec {
    pub const DEFAULT_MPP: f64 = 0.25;

    /// ROI with the default scan resolution; adjust with the `with_*` helpers.
    pub fn new(id: impl Into<String>, width_px: u32, height_px: u32) -> Result<Self, GeomError> {
        if width_px == 0 || height_px == 0 {
            return Err(GeomError::InvalidRoi("extent must be at least 1 px"));
        }
        Ok(Self {
            id: id.into(),
            width_px,
            height_px,
            mpp: Self::DEFAULT_MPP,
            domain: Domain::Human,
            tumor_type: String::new(),
        })
    }

    pub fn with_mpp(mut self, mpp: f64) -> Result<Self, GeomError> {
        if mpp.is_nan() || mpp <= 0.0 || !mpp.is_finite() {
            return Err(GeomError::InvalidRoi("mpp must be positive"));
        }
        self.mpp = mpp;
        Ok(self)
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_tumor_type(mut self, tumor_type: impl Into<String>) -> Self {
        self.tumor_type = tumor_type.into();
        self
    }
}

/// Point-centered ground-truth annotation in the ROI frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub center: (f64, f64),
    pub label: Label,
}

impl Annotation {
    pub fn new(x: f64, y: f64, label: Label) -> Self {
        Self {
            center: (x, y),
            label,
        }
    }

    pub fn in_roi(&self, roi: &RoiSpec) -> bool {
        let (x, y) = self.center;
        x >= 0.0 && x < roi.width_px as f64 && y >= 0.0 && y < roi.height_px as f64
    }

    /// Translated into the frame anchored at `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            center: (self.center.0 + dx, self.center.1 + dy),
            label: self.label,
        }
    }
}
