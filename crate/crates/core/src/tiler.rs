//! Overlapping fixed-size tile grids over an ROI.
//!
//! Grid planning is deterministic and row-major: axis positions run
//! `0, stride, 2*stride, ...` while a full tile still fits, plus one final
//! clamped position when pixels would otherwise stay uncovered. ROIs smaller
//! than a tile get a single padded tile (white fill on read).

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Annotation, Detection, RoiSpec};

#[derive(Debug, Error, PartialEq)]
pub enum TileError {
    #[error("invalid tile grid config: {0}")]
    InvalidConfig(&'static str),
    #[error("detection box [{0}, {1}, {2}, {3}] exceeds the tile extent")]
    BoxOutsideTile(f64, f64, f64, f64),
}

/// Tile side length and lattice stride, in pixels.
///
/// The training export uses a 160 px overlap and inference a 480 px stride;
/// with 640 px tiles these are the same lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGridConfig {
    pub tile_size: u32,
    pub stride: u32,
}

impl TileGridConfig {
    pub fn new(tile_size: u32, stride: u32) -> Result<Self, TileError> {
        let cfg = Self { tile_size, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TileError> {
        if self.tile_size == 0 {
            return Err(TileError::InvalidConfig("tile_size must be positive"));
        }
        if self.stride == 0 || self.stride > self.tile_size {
            return Err(TileError::InvalidConfig(
                "stride must satisfy 0 < stride <= tile_size",
            ));
        }
        Ok(())
    }
}

impl Default for TileGridConfig {
    fn default() -> Self {
        Self {
            tile_size: 640,
            stride: 480,
        }
    }
}

/// Placement of one tile on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    /// (row, col) on the lattice.
    pub index: (usize, usize),
    /// Top-left corner in ROI pixels.
    pub origin: (u32, u32),
    pub size: u32,
    /// Final position on an axis was pulled back to `extent - size`.
    pub clamped: bool,
    /// ROI is smaller than a tile on at least one axis; reads pad with white.
    pub padded: bool,
}

impl TileSpec {
    /// Half-open interior `[origin, origin + size)` contains the point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (ox, oy) = (self.origin.0 as f64, self.origin.1 as f64);
        let s = self.size as f64;
        x >= ox && x < ox + s && y >= oy && y < oy + s
    }
}

fn axis_positions(extent: u32, tile: u32, stride: u32) -> Vec<(u32, bool, bool)> {
    if extent < tile {
        return vec![(0, false, true)];
    }
    let mut positions = Vec::new();
    let mut pos = 0u32;
    while pos + tile <= extent {
        positions.push((pos, false, false));
        pos += stride;
    }
    let last = positions.last().map(|&(p, _, _)| p).unwrap_or(0);
    if last + tile < extent {
        positions.push((extent - tile, true, false));
    }
    positions
}

/// Plan the tile grid covering `roi`, ordered row-major.
///
/// Every ROI pixel is covered by at least one tile.
pub fn plan_grid(roi: &RoiSpec, cfg: &TileGridConfig) -> Result<Vec<TileSpec>, TileError> {
    cfg.validate()?;
    let xs = axis_positions(roi.width_px, cfg.tile_size, cfg.stride);
    let ys = axis_positions(roi.height_px, cfg.tile_size, cfg.stride);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (row, &(oy, cy, py)) in ys.iter().enumerate() {
        for (col, &(ox, cx, px)) in xs.iter().enumerate() {
            tiles.push(TileSpec {
                index: (row, col),
                origin: (ox, oy),
                size: cfg.tile_size,
                clamped: cx || cy,
                padded: px || py,
            });
        }
    }
    Ok(tiles)
}

/// Annotations owned by one tile, translated to its local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TileAnnotations {
    pub annotations: Vec<Annotation>,
    /// No annotation center falls inside this tile.
    pub background: bool,
}

/// Assign each annotation to every tile whose half-open interior contains its
/// center, translating coordinates to the tile-local frame.
///
/// Output is aligned with `grid`; tiles with no assigned annotation carry
/// `background = true`.
pub fn assign_annotations(grid: &[TileSpec], annotations: &[Annotation]) -> Vec<TileAnnotations> {
    let mut out: Vec<TileAnnotations> = grid
        .iter()
        .map(|_| TileAnnotations {
            annotations: Vec::new(),
            background: true,
        })
        .collect();
    for ann in annotations {
        let (x, y) = ann.center;
        for (tile, slot) in grid.iter().zip(out.iter_mut()) {
            if tile.contains(x, y) {
                slot.annotations
                    .push(ann.translate(-(tile.origin.0 as f64), -(tile.origin.1 as f64)));
                slot.background = false;
            }
        }
    }
    out
}

/// Translate a tile-local detection into the ROI frame.
///
/// The box must lie within `[0, size]^2`; score, label and provenance are
/// preserved.
pub fn remap_to_roi(det: &Detection, tile: &TileSpec) -> Result<Detection, TileError> {
    let b = det.bbox();
    let s = tile.size as f64;
    if b.x_min() < 0.0 || b.y_min() < 0.0 || b.x_max() > s || b.y_max() > s {
        return Err(TileError::BoxOutsideTile(
            b.x_min(),
            b.y_min(),
            b.x_max(),
            b.y_max(),
        ));
    }
    let moved = b
        .translate(tile.origin.0 as f64, tile.origin.1 as f64)
        .expect("translation preserves validity");
    Ok(det.with_bbox(moved))
}

/// Read the tile's pixels out of the ROI image, padding with white where the
/// tile extends past the image (undersized ROIs only).
pub fn extract_tile(image: &RgbImage, tile: &TileSpec) -> RgbImage {
    let mut out = RgbImage::from_pixel(tile.size, tile.size, Rgb([255, 255, 255]));
    let (ox, oy) = tile.origin;
    let w = image.width().saturating_sub(ox).min(tile.size);
    let h = image.height().saturating_sub(oy).min(tile.size);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x, y, *image.get_pixel(ox + x, oy + y));
        }
    }
    out
}
