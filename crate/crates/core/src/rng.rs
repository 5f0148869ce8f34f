//! Labeled, order-independent random streams.
//!
//! All stochastic stages (mock detector jitter, stain application, background
//! sampling, batch shuffling) derive their generators from one root seed plus
//! a stream label and an item index. Workers processing items in any order
//! therefore draw from disjoint streams and produce identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable labels for the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamLabel {
    /// Mock detector output for one (tile, TTA variant) evaluation.
    MockDetector,
    /// Per-tile stain-normalization coin flip and profile choice.
    StainApply,
    /// Background-tile supplement sampling for manifests.
    ManifestSample,
    /// Domain-balanced batch shuffling.
    BatchSampler,
}

impl StreamLabel {
    fn base(self) -> u64 {
        // Streams are spaced far enough apart that per-item indices never
        // collide across labels.
        match self {
            StreamLabel::MockDetector => 1 << 40,
            StreamLabel::StainApply => 2 << 40,
            StreamLabel::ManifestSample => 3 << 40,
            StreamLabel::BatchSampler => 4 << 40,
        }
    }
}

/// Generator for stream `(label, index)` under `root_seed`.
///
/// The same triple always yields the same sequence; distinct triples yield
/// independent sequences.
pub fn stream(root_seed: u64, label: StreamLabel, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(label.base().wrapping_add(index));
    rng
}

/// Per-ROI seed derived from the run's root seed, so multi-ROI runs draw
/// independent streams per image while staying reproducible (FNV-1a mix).
pub fn roi_seed(root_seed: u64, roi_id: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325 ^ root_seed;
    for byte in roi_id.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
