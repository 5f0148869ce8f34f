//! Dataset manifests and the domain-balanced batch sampler.
//!
//! A manifest lists every annotated tile plus a seeded uniform sample of
//! background tiles. The sampler emits batches holding a fixed human/canine
//! split, drawing without replacement per domain and reshuffling a domain
//! whenever its pass is exhausted, so the minority domain recycles while the
//! majority never repeats within one of its passes.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Annotation, Domain, RoiSpec};
use crate::rng::{stream, StreamLabel};
use crate::tiler::{assign_annotations, TileSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("invalid manifest config: {0}")]
    InvalidConfig(&'static str),
    #[error("required domain {0:?} has no tiles")]
    DomainEmpty(Domain),
}

/// One tile of the training corpus. Serialized as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: String,
    pub roi_id: String,
    pub origin: (u32, u32),
    pub background: bool,
    pub domain: Domain,
    pub annotation_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestConfig {
    /// Background tiles added on top of the annotated ones.
    pub background_supplement: usize,
    pub batch_size: usize,
    pub human_fraction: f64,
    pub seed: u64,
}

impl Default for ManifestConfig {
    fn default() -> Self {
        Self {
            background_supplement: 80_000,
            batch_size: 64,
            human_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ManifestConfig {
    pub fn validate(&self) -> Result<(), ManifestError> {
        if !(0.0..=1.0).contains(&self.human_fraction) {
            return Err(ManifestError::InvalidConfig(
                "human_fraction must lie in [0, 1]",
            ));
        }
        if self.batch_size < 2 {
            return Err(ManifestError::InvalidConfig("batch_size must be at least 2"));
        }
        Ok(())
    }

    /// Human tiles per batch, rounding half-up; the remainder is canine.
    pub fn human_quota(&self) -> usize {
        ((self.batch_size as f64 * self.human_fraction) + 0.5).floor() as usize
    }
}

/// One ROI's grid and ground truth, the unit of manifest building.
#[derive(Debug, Clone)]
pub struct RoiTileSet {
    pub roi: RoiSpec,
    pub grid: Vec<TileSpec>,
    pub annotations: Vec<Annotation>,
}

/// Per-domain counts of what went into a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ManifestSummary {
    pub annotated_human: usize,
    pub annotated_canine: usize,
    pub background_human: usize,
    pub background_canine: usize,
    /// Background tiles that existed before sampling.
    pub background_available: usize,
}

fn tile_id(roi: &RoiSpec, tile: &TileSpec) -> String {
    format!("{}:r{}c{}", roi.id, tile.index.0, tile.index.1)
}

/// One record per annotated tile plus `background_supplement` background
/// tiles sampled uniformly (seeded, without replacement) across all ROIs.
///
/// When the supplement exceeds the available background tiles, all of them
/// are taken and a warning is logged.
pub fn build_manifest(
    rois: &[RoiTileSet],
    cfg: &ManifestConfig,
) -> Result<(Vec<TileRecord>, ManifestSummary), ManifestError> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut background_pool = Vec::new();
    let mut summary = ManifestSummary::default();

    for set in rois {
        let assigned = assign_annotations(&set.grid, &set.annotations);
        for (tile, slot) in set.grid.iter().zip(assigned) {
            let record = TileRecord {
                tile_id: tile_id(&set.roi, tile),
                roi_id: set.roi.id.clone(),
                origin: tile.origin,
                background: slot.background,
                domain: set.roi.domain,
                annotation_count: slot.annotations.len(),
            };
            if slot.background {
                background_pool.push(record);
            } else {
                match set.roi.domain {
                    Domain::Human => summary.annotated_human += 1,
                    Domain::Canine => summary.annotated_canine += 1,
                }
                records.push(record);
            }
        }
    }

    summary.background_available = background_pool.len();
    let take = cfg.background_supplement.min(background_pool.len());
    if take < cfg.background_supplement {
        log::warn!(
            "requested {} background tiles but only {} are available; taking all",
            cfg.background_supplement,
            background_pool.len()
        );
    }
    let mut rng = stream(cfg.seed, StreamLabel::ManifestSample, 0);
    background_pool.shuffle(&mut rng);
    for record in background_pool.into_iter().take(take) {
        match record.domain {
            Domain::Human => summary.background_human += 1,
            Domain::Canine => summary.background_canine += 1,
        }
        records.push(record);
    }
    Ok((records, summary))
}

#[derive(Debug)]
struct DomainPool {
    ids: Vec<String>,
    cursor: usize,
}

impl DomainPool {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> String {
        if self.cursor == self.ids.len() {
            self.ids.shuffle(rng);
            self.cursor = 0;
        }
        let id = self.ids[self.cursor].clone();
        self.cursor += 1;
        id
    }
}

/// Infinite, seeded sequence of balanced batches; take as many as needed.
#[derive(Debug)]
pub struct BalancedBatches {
    rng: ChaCha8Rng,
    human: DomainPool,
    canine: DomainPool,
    human_quota: usize,
    canine_quota: usize,
}

impl BalancedBatches {
    /// Batches in one pass over the domain that lasts longest at its quota.
    pub fn epoch_batches(&self) -> usize {
        let per_domain =
            |pool: &DomainPool, quota: usize| pool.ids.len().checked_div(quota).unwrap_or(0);
        per_domain(&self.human, self.human_quota)
            .max(per_domain(&self.canine, self.canine_quota))
            .max(1)
    }
}

impl Iterator for BalancedBatches {
    type Item = Vec<String>;

    fn next(&mut self) -> Option<Vec<String>> {
        let mut batch = Vec::with_capacity(self.human_quota + self.canine_quota);
        for _ in 0..self.human_quota {
            batch.push(self.human.draw(&mut self.rng));
        }
        for _ in 0..self.canine_quota {
            batch.push(self.canine.draw(&mut self.rng));
        }
        Some(batch)
    }
}

/// Build the balanced batch generator over a manifest.
///
/// Every batch holds `round(batch_size * human_fraction)` human tile ids and
/// the remainder canine; a domain with a positive quota must be present.
pub fn balanced_batches(
    records: &[TileRecord],
    cfg: &ManifestConfig,
) -> Result<BalancedBatches, ManifestError> {
    cfg.validate()?;
    let human_quota = cfg.human_quota();
    let canine_quota = cfg.batch_size - human_quota;
    let collect = |domain: Domain| -> Vec<String> {
        records
            .iter()
            .filter(|r| r.domain == domain)
            .map(|r| r.tile_id.clone())
            .collect()
    };
    let human_ids = collect(Domain::Human);
    let canine_ids = collect(Domain::Canine);
    if human_quota > 0 && human_ids.is_empty() {
        return Err(ManifestError::DomainEmpty(Domain::Human));
    }
    if canine_quota > 0 && canine_ids.is_empty() {
        return Err(ManifestError::DomainEmpty(Domain::Canine));
    }

    let mut rng = stream(cfg.seed, StreamLabel::BatchSampler, 0);
    let mut human = DomainPool {
        ids: human_ids,
        cursor: 0,
    };
    let mut canine = DomainPool {
        ids: canine_ids,
        cursor: 0,
    };
    // Initial pass orders, drawn in a fixed sequence.
    if human_quota > 0 {
        human.ids.shuffle(&mut rng);
    }
    if canine_quota > 0 {
        canine.ids.shuffle(&mut rng);
    }
    Ok(BalancedBatches {
        rng,
        human,
        canine,
        human_quota,
        canine_quota,
    })
}
