//! Building blocks for mitotic-figure detection on histology ROIs: overlap
//! tiling, Macenko stain normalization, a pluggable detector contract with a
//! deterministic mock, TTA + NMS + Weighted Boxes Fusion stitching,
//! domain-balanced dataset manifests, and distance-matched evaluation.
//!
//! Every stage is a pure function over immutable inputs; all randomness flows
//! from a single root seed through labeled sub-streams (see [`rng`]), so runs
//! are reproducible bit-for-bit regardless of worker count.

pub mod detect;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod manifest;
pub mod pipeline;
pub mod records;
pub mod rng;
pub mod stain;
pub mod tiler;

pub use detect::{DetectorBackend, MockBackend, MockParams};
pub use eval::{EvalReport, MatchConfig};
pub use fusion::{FusionConfig, ScoreMode, TtaVariant};
pub use geom::{Annotation, Detection, Domain, Label, PixelBox, RoiSpec};
pub use pipeline::{BackendSpec, PipelineConfig, RunOutput};
pub use stain::{StainBank, StainProfile};
pub use tiler::{TileGridConfig, TileSpec};
