//! Macenko stain-matrix estimation and multi-target stain normalization.
//!
//! Stain contributions are additive in optical density (Beer-Lambert):
//! `OD = -log10(I / I0)`. Fitting projects tissue OD vectors onto the top-2
//! eigenvector plane of their covariance, takes extreme percentile polar
//! angles as the stain directions, and solves per-pixel concentrations by
//! least squares. A bank of per-ROI profiles drives stochastic normalization
//! as augmentation: each tile is normalized to a uniformly drawn profile with
//! a configured probability.

use std::collections::HashSet;

use image::RgbImage;
use nalgebra::{Matrix2x3, Matrix3, Matrix3x2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// White reference intensity for the OD transform.
pub const DEFAULT_I0: f64 = 255.0;

/// Default probability that a tile gets stain-normalized during augmentation.
pub const DEFAULT_APPLY_PROBABILITY: f64 = 0.25;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("too few tissue pixels: found {found}, need at least {required}")]
    TooFewTissuePixels { found: usize, required: usize },
    #[error("degenerate stains: {0}")]
    DegenerateStains(&'static str),
    #[error("duplicate ROI id {0:?} in bank inputs")]
    DuplicateRoiId(String),
    #[error("only {kept} of {requested} requested profiles could be fitted")]
    BankTooSmall { kept: usize, requested: usize },
    #[error("invalid stain bank: {0}")]
    InvalidBank(String),
}

/// Per-pixel optical densities, same spatial dimensions as the source RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    width: u32,
    height: u32,
    data: Vec<[f64; 3]>,
}

impl OdImage {
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }
}

/// `OD = -log10(max(I, 1) / I0)` per channel; the clamp keeps zeros finite.
pub fn rgb_to_od(image: &RgbImage, i0: f64) -> OdImage {
    let data = image
        .pixels()
        .map(|p| {
            let od = |v: u8| -((v.max(1) as f64 / i0).log10());
            [od(p[0]), od(p[1]), od(p[2])]
        })
        .collect();
    OdImage {
        width: image.width(),
        height: image.height(),
        data,
    }
}

/// `I = I0 * 10^(-OD)`, rounded half-up and clamped to `[0, 255]`.
pub fn od_to_rgb(od: &OdImage, i0: f64) -> RgbImage {
    let mut out = RgbImage::new(od.width, od.height);
    for (dst, src) in out.pixels_mut().zip(od.data.iter()) {
        for ch in 0..3 {
            let v = (i0 * 10f64.powf(-src[ch])).round().clamp(0.0, 255.0);
            dst[ch] = v as u8;
        }
    }
    out
}

/// Knobs of the classical Macenko fit.
#[derive(Debug, Clone, Copy)]
pub struct MacenkoParams {
    /// OD channel value below which a pixel counts as non-tissue.
    pub od_threshold: f64,
    /// Extreme-angle percentile (alpha-th and (100-alpha)-th).
    pub angle_percentile: f64,
    pub min_tissue_pixels: usize,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            angle_percentile: 1.0,
            min_tissue_pixels: 100,
        }
    }
}

/// A fitted stain basis: unit OD vectors for H and E plus per-stain
/// concentration ceilings (99th percentile over tissue pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    stain_matrix: Matrix3x2<f64>,
    max_conc: [f64; 2],
    source_roi: String,
}

impl StainProfile {
    /// Columns are unit-norm, nonnegative and linearly independent;
    /// `max_conc` is positive componentwise.
    pub fn new(
        stain_matrix: Matrix3x2<f64>,
        max_conc: [f64; 2],
        source_roi: impl Into<String>,
    ) -> Result<Self, StainError> {
        for c in 0..2 {
            let col = stain_matrix.column(c);
            if (col.norm() - 1.0).abs() > 1e-6 {
                return Err(StainError::DegenerateStains("stain column not unit norm"));
            }
            if col.iter().any(|&v| v < 0.0) {
                return Err(StainError::DegenerateStains(
                    "stain column has negative entry",
                ));
            }
        }
        let h = stain_matrix.column(0).into_owned();
        let e = stain_matrix.column(1).into_owned();
        if h.cross(&e).norm() < 1e-3 {
            return Err(StainError::DegenerateStains("stain columns are collinear"));
        }
        if max_conc.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(StainError::DegenerateStains(
                "max concentration must be positive",
            ));
        }
        Ok(Self {
            stain_matrix,
            max_conc,
            source_roi: source_roi.into(),
        })
    }

    pub fn stain_matrix(&self) -> &Matrix3x2<f64> {
        &self.stain_matrix
    }
    pub fn max_conc(&self) -> [f64; 2] {
        self.max_conc
    }
    pub fn source_roi(&self) -> &str {
        &self.source_roi
    }

    pub fn named(mut self, source_roi: impl Into<String>) -> Self {
        self.source_roi = source_roi.into();
        self
    }
}

fn percentile(mut values: Vec<f64>, p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("percentile over finite values"));
    let rank = (p / 100.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

/// `(M^T M)^-1 M^T`: least-squares solve of `M c = od` per pixel.
fn pseudo_inverse(m: &Matrix3x2<f64>) -> Result<Matrix2x3<f64>, StainError> {
    let mtm = m.tr_mul(m);
    let inv = mtm
        .try_inverse()
        .ok_or(StainError::DegenerateStains("stain columns are collinear"))?;
    Ok(inv * m.transpose())
}

fn concentrations(pinv: &Matrix2x3<f64>, od: &Vector3<f64>) -> [f64; 2] {
    let c = pinv * od;
    [c[0].max(0.0), c[1].max(0.0)]
}

/// Map a polar angle in the eigenvector plane back to a nonnegative unit
/// 3-vector.
fn direction(
    phi: f64,
    e1: &Vector3<f64>,
    e2: &Vector3<f64>,
) -> Result<Vector3<f64>, StainError> {
    let mut v = e1 * phi.cos() + e2 * phi.sin();
    if v.sum() < 0.0 {
        v = -v;
    }
    v.apply(|x| *x = x.max(0.0));
    let norm = v.norm();
    if norm < 1e-6 {
        return Err(StainError::DegenerateStains(
            "extreme direction collapsed to zero",
        ));
    }
    Ok(v / norm)
}

/// Fit a stain profile on one image with the classical Macenko procedure.
///
/// The returned profile carries an empty source id; tag it with
/// [`StainProfile::named`] when building banks.
pub fn fit_stain_profile(
    image: &RgbImage,
    params: &MacenkoParams,
) -> Result<StainProfile, StainError> {
    let od = rgb_to_od(image, DEFAULT_I0);
    let tissue: Vec<Vector3<f64>> = od
        .data
        .iter()
        .filter(|p| p.iter().any(|&c| c > params.od_threshold))
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect();
    if tissue.len() < params.min_tissue_pixels {
        return Err(StainError::TooFewTissuePixels {
            found: tissue.len(),
            required: params.min_tissue_pixels,
        });
    }

    let n = tissue.len() as f64;
    let mean: Vector3<f64> = tissue.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for x in &tissue {
        let d = x - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut e1 = eig.eigenvectors.column(order[0]).into_owned();
    let mut e2 = eig.eigenvectors.column(order[1]).into_owned();
    // Orient the plane basis toward the data so polar angles are stable.
    if tissue.iter().map(|x| x.dot(&e1)).sum::<f64>() < 0.0 {
        e1 = -e1;
    }
    if tissue.iter().map(|x| x.dot(&e2)).sum::<f64>() < 0.0 {
        e2 = -e2;
    }

    let angles: Vec<f64> = tissue
        .iter()
        .map(|x| x.dot(&e2).atan2(x.dot(&e1)))
        .collect();
    let alpha = params.angle_percentile;
    let phi_lo = percentile(angles.clone(), alpha);
    let phi_hi = percentile(angles, 100.0 - alpha);
    if phi_hi - phi_lo < 1f64.to_radians() {
        return Err(StainError::DegenerateStains(
            "extreme angles within 1 degree of each other",
        ));
    }

    // Larger polar angle is labeled H; swap if its blue-channel OD is not
    // the larger of the two.
    let mut h = direction(phi_hi, &e1, &e2)?;
    let mut e = direction(phi_lo, &e1, &e2)?;
    if h[2] < e[2] {
        std::mem::swap(&mut h, &mut e);
    }
    let stain_matrix = Matrix3x2::from_columns(&[h, e]);

    let pinv = pseudo_inverse(&stain_matrix)?;
    let mut c_h = Vec::with_capacity(tissue.len());
    let mut c_e = Vec::with_capacity(tissue.len());
    for x in &tissue {
        let c = concentrations(&pinv, x);
        c_h.push(c[0]);
        c_e.push(c[1]);
    }
    let max_conc = [percentile(c_h, 99.0), percentile(c_e, 99.0)];
    if max_conc.iter().any(|&v| v <= 1e-9) {
        return Err(StainError::DegenerateStains("stain concentration collapsed"));
    }

    StainProfile::new(stain_matrix, max_conc, String::new())
}

/// Map the image's stain appearance onto `target`.
///
/// Fits the source profile, rescales each concentration channel by the ratio
/// of concentration ceilings, and reconstructs through the target basis.
/// Output dimensions equal input dimensions.
pub fn normalize_with(
    image: &RgbImage,
    target: &StainProfile,
    params: &MacenkoParams,
) -> Result<RgbImage, StainError> {
    let source = fit_stain_profile(image, params)?;
    let pinv = pseudo_inverse(&source.stain_matrix)?;
    let scale = [
        target.max_conc[0] / source.max_conc[0],
        target.max_conc[1] / source.max_conc[1],
    ];
    let od = rgb_to_od(image, DEFAULT_I0);
    let data = od
        .data
        .iter()
        .map(|p| {
            let c = concentrations(&pinv, &Vector3::new(p[0], p[1], p[2]));
            let rebuilt =
                target.stain_matrix * nalgebra::Vector2::new(c[0] * scale[0], c[1] * scale[1]);
            [rebuilt[0], rebuilt[1], rebuilt[2]]
        })
        .collect();
    Ok(od_to_rgb(
        &OdImage {
            width: od.width,
            height: od.height,
            data,
        },
        DEFAULT_I0,
    ))
}

/// [`normalize_with`] under default Macenko parameters.
pub fn normalize(image: &RgbImage, target: &StainProfile) -> Result<RgbImage, StainError> {
    normalize_with(image, target, &MacenkoParams::default())
}

/// A bank of per-ROI normalization targets with a runtime apply probability.
#[derive(Debug, Clone, PartialEq)]
pub struct StainBank {
    profiles: Vec<StainProfile>,
    apply_probability: f64,
}

impl StainBank {
    pub fn new(profiles: Vec<StainProfile>, apply_probability: f64) -> Result<Self, StainError> {
        if !(0.0..=1.0).contains(&apply_probability) {
            return Err(StainError::InvalidBank(format!(
                "apply_probability {apply_probability} outside [0, 1]"
            )));
        }
        if profiles.is_empty() && apply_probability > 0.0 {
            return Err(StainError::InvalidBank(
                "empty bank with positive apply probability".into(),
            ));
        }
        Ok(Self {
            profiles,
            apply_probability,
        })
    }

    pub fn profiles(&self) -> &[StainProfile] {
        &self.profiles
    }
    pub fn apply_probability(&self) -> f64 {
        self.apply_probability
    }

    pub fn profile_by_id(&self, source_roi: &str) -> Option<&StainProfile> {
        self.profiles.iter().find(|p| p.source_roi == source_roi)
    }

    pub fn with_apply_probability(self, apply_probability: f64) -> Result<Self, StainError> {
        Self::new(self.profiles, apply_probability)
    }

    pub fn to_json(&self) -> String {
        let file = BankFile::from(self);
        serde_json::to_string_pretty(&file).expect("bank serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, StainError> {
        let file: BankFile =
            serde_json::from_str(text).map_err(|e| StainError::InvalidBank(e.to_string()))?;
        file.try_into()
    }
}

/// Serialized bank layout. `stain_matrix` is 9 numbers row-major: columns are
/// H, E and the residual axis (normalized cross product, informational).
#[derive(Debug, Serialize, Deserialize)]
struct BankFile {
    profiles: Vec<ProfileRecord>,
    apply_probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRecord {
    source_roi: String,
    stain_matrix: Vec<f64>,
    max_conc: Vec<f64>,
}

impl From<&StainBank> for BankFile {
    fn from(bank: &StainBank) -> Self {
        let profiles = bank
            .profiles
            .iter()
            .map(|p| {
                let h = p.stain_matrix.column(0).into_owned();
                let e = p.stain_matrix.column(1).into_owned();
                let r = h.cross(&e).normalize();
                let mut m = Vec::with_capacity(9);
                for row in 0..3 {
                    m.extend_from_slice(&[h[row], e[row], r[row]]);
                }
                ProfileRecord {
                    source_roi: p.source_roi.clone(),
                    stain_matrix: m,
                    max_conc: p.max_conc.to_vec(),
                }
            })
            .collect();
        BankFile {
            profiles,
            apply_probability: bank.apply_probability,
        }
    }
}

impl TryFrom<BankFile> for StainBank {
    type Error = StainError;

    fn try_from(file: BankFile) -> Result<Self, StainError> {
        let mut profiles = Vec::with_capacity(file.profiles.len());
        for rec in &file.profiles {
            if rec.stain_matrix.len() != 9 {
                return Err(StainError::InvalidBank(format!(
                    "profile {:?}: stain_matrix must hold 9 numbers, got {}",
                    rec.source_roi,
                    rec.stain_matrix.len()
                )));
            }
            if rec.max_conc.len() != 2 {
                return Err(StainError::InvalidBank(format!(
                    "profile {:?}: max_conc must hold 2 numbers, got {}",
                    rec.source_roi,
                    rec.max_conc.len()
                )));
            }
            let m = &rec.stain_matrix;
            let h = Vector3::new(m[0], m[3], m[6]);
            let e = Vector3::new(m[1], m[4], m[7]);
            let profile = StainProfile::new(
                Matrix3x2::from_columns(&[h, e]),
                [rec.max_conc[0], rec.max_conc[1]],
                rec.source_roi.clone(),
            )
            .map_err(|err| {
                StainError::InvalidBank(format!("profile {:?}: {err}", rec.source_roi))
            })?;
            profiles.push(profile);
        }
        StainBank::new(profiles, file.apply_probability)
    }
}

/// Fit one profile per `(roi_id, image)` and assemble the bank.
///
/// ROIs whose fit fails are skipped with a warning; fewer than `n / 2`
/// surviving profiles is an error. Duplicate ROI ids are rejected.
pub fn build_bank(images: &[(String, RgbImage)], n: usize) -> Result<StainBank, StainError> {
    let mut seen = HashSet::new();
    for (id, _) in images {
        if !seen.insert(id.as_str()) {
            return Err(StainError::DuplicateRoiId(id.clone()));
        }
    }
    let params = MacenkoParams::default();
    let mut profiles = Vec::with_capacity(images.len());
    for (id, image) in images {
        match fit_stain_profile(image, &params) {
            Ok(profile) => profiles.push(profile.named(id)),
            Err(err) => log::warn!("skipping ROI {id:?}: {err}"),
        }
    }
    if profiles.len() * 2 < n {
        return Err(StainError::BankTooSmall {
            kept: profiles.len(),
            requested: n,
        });
    }
    StainBank::new(profiles, DEFAULT_APPLY_PROBABILITY)
}

/// With probability `bank.apply_probability`, normalize to a uniformly drawn
/// profile and report its id; otherwise return the input unchanged.
///
/// Tiles where fitting fails (e.g. background without tissue) pass through
/// unchanged. Deterministic for a given RNG state.
pub fn stochastic_apply(
    image: &RgbImage,
    bank: &StainBank,
    rng: &mut impl Rng,
) -> (RgbImage, Option<String>) {
    let u: f64 = rng.random();
    if u >= bank.apply_probability {
        return (image.clone(), None);
    }
    let idx = rng.random_range(0..bank.profiles.len());
    let profile = &bank.profiles[idx];
    match normalize(image, profile) {
        Ok(out) => (out, Some(profile.source_roi.clone())),
        Err(_) => (image.clone(), None),
    }
}

/// Synthetic forward-model generators shared by tests across modules.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    pub fn unit(v: [f64; 3]) -> Vector3<f64> {
        Vector3::from(v).normalize()
    }

    /// Forward Beer-Lambert render: OD = M * C per pixel, quantized to RGB.
    pub fn synth_image(
        h: Vector3<f64>,
        e: Vector3<f64>,
        concs: &[(f64, f64)],
        width: u32,
    ) -> RgbImage {
        let height = (concs.len() as u32).div_ceil(width);
        let data: Vec<[f64; 3]> = concs
            .iter()
            .map(|&(c1, c2)| {
                let od = h * c1 + e * c2;
                [od[0], od[1], od[2]]
            })
            .chain(std::iter::repeat([0.0, 0.0, 0.0]))
            .take((width * height) as usize)
            .collect();
        od_to_rgb(
            &OdImage {
                width,
                height,
                data,
            },
            DEFAULT_I0,
        )
    }

    /// Concentration field with stain-dominant tails so extreme percentile
    /// angles recover the pure stain directions.
    pub fn synth_concentrations(rng: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| match i % 5 {
                0 | 1 => (rng.random_range(0.5..1.5), rng.random_range(0.0..0.04)),
                2 | 3 => (rng.random_range(0.0..0.04), rng.random_range(0.5..1.5)),
                _ => (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)),
            })
            .collect()
    }

    pub fn reference_h() -> Vector3<f64> {
        unit([0.65, 0.70, 0.29])
    }

    pub fn reference_e() -> Vector3<f64> {
        unit([0.07, 0.99, 0.11])
    }

    /// `(roi_id, image)` inputs good enough to fit a small bank.
    pub fn bank_inputs(count: usize) -> Vec<(String, RgbImage)> {
        let mut rng = StdRng::seed_from_u64(181);
        (0..count)
            .map(|i| {
                let concs = synth_concentrations(&mut rng, 40 * 40);
                let img = synth_image(reference_h(), reference_e(), &concs, 40);
                (format!("bank-{i}"), img)
            })
            .collect()
    }

    /// A rectangle of plausible tissue pixels.
    pub fn tissue_patch(width: u32, height: u32) -> RgbImage {
        let mut rng = StdRng::seed_from_u64(77);
        let concs = synth_concentrations(&mut rng, (width * height) as usize);
        synth_image(reference_h(), reference_e(), &concs, width)
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::*;
    use super::*;
    use crate::rng::{stream, StreamLabel};
    use image::Rgb;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn od_of_white_is_zero() {
        let img = RgbImage::from_pixel(2, 2, Rgb([255, 255, 255]));
        let od = rgb_to_od(&img, DEFAULT_I0);
        assert!(od.pixels().iter().all(|p| p.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn od_of_intensity_26() {
        let img = RgbImage::from_pixel(1, 1, Rgb([26, 26, 26]));
        let od = rgb_to_od(&img, DEFAULT_I0);
        let expected = -(26.0f64 / 255.0).log10();
        for &c in &od.pixels()[0] {
            assert!((c - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn od_one_maps_to_26() {
        let od = OdImage {
            width: 1,
            height: 1,
            data: vec![[1.0, 1.0, 1.0]],
        };
        let img = od_to_rgb(&od, DEFAULT_I0);
        // 255 * 10^-1 = 25.5, rounds half-up to 26.
        assert_eq!(*img.get_pixel(0, 0), Rgb([26, 26, 26]));
    }

    #[test]
    fn od_zero_maps_to_white() {
        let od = OdImage {
            width: 1,
            height: 1,
            data: vec![[0.0, 0.0, 0.0]],
        };
        assert_eq!(*od_to_rgb(&od, DEFAULT_I0).get_pixel(0, 0), Rgb([255, 255, 255]));
    }

    #[test]
    fn od_round_trip_within_one_level() {
        let mut img = RgbImage::new(255, 1);
        for v in 1..=255u32 {
            img.put_pixel(v - 1, 0, Rgb([v as u8, v as u8, v as u8]));
        }
        let back = od_to_rgb(&rgb_to_od(&img, DEFAULT_I0), DEFAULT_I0);
        for v in 1..=255u32 {
            let got = back.get_pixel(v - 1, 0)[0] as i32;
            assert!((got - v as i32).abs() <= 1, "intensity {v} became {got}");
        }
    }

    #[test]
    fn fit_recovers_known_stain_matrix() {
        let (h, e) = (reference_h(), reference_e());
        let mut rng = StdRng::seed_from_u64(11);
        let concs = synth_concentrations(&mut rng, 120 * 120);
        let img = synth_image(h, e, &concs, 120);
        let profile = fit_stain_profile(&img, &MacenkoParams::default()).unwrap();
        let got_h = profile.stain_matrix().column(0).into_owned();
        let got_e = profile.stain_matrix().column(1).into_owned();
        assert!(got_h.dot(&h) >= 0.995, "H cosine {}", got_h.dot(&h));
        assert!(got_e.dot(&e) >= 0.995, "E cosine {}", got_e.dot(&e));
    }

    #[test]
    fn fit_rejects_all_white() {
        let img = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
        assert!(matches!(
            fit_stain_profile(&img, &MacenkoParams::default()),
            Err(StainError::TooFewTissuePixels { .. })
        ));
    }

    #[test]
    fn fit_rejects_single_stain() {
        let h = reference_h();
        let mut rng = StdRng::seed_from_u64(5);
        let concs: Vec<(f64, f64)> = (0..4096)
            .map(|_| (rng.random_range(0.9..1.4), 0.0))
            .collect();
        let img = synth_image(h, reference_e(), &concs, 64);
        assert!(matches!(
            fit_stain_profile(&img, &MacenkoParams::default()),
            Err(StainError::DegenerateStains(_))
        ));
    }

    #[test]
    fn self_target_normalization_is_near_identity() {
        let (h, e) = (reference_h(), reference_e());
        let mut rng = StdRng::seed_from_u64(23);
        let concs = synth_concentrations(&mut rng, 96 * 96);
        let img = synth_image(h, e, &concs, 96);
        let profile = fit_stain_profile(&img, &MacenkoParams::default()).unwrap();
        let out = normalize(&img, &profile).unwrap();
        assert_eq!(out.dimensions(), img.dimensions());
        let thresh = MacenkoParams::default().od_threshold;
        for (a, b) in img.pixels().zip(out.pixels()) {
            let od_mag = a.0.iter().map(|&v| -((v.max(1) as f64) / 255.0).log10());
            if od_mag.clone().any(|c| c > thresh) {
                for ch in 0..3 {
                    let diff = (a[ch] as i32 - b[ch] as i32).abs();
                    assert!(diff <= 2, "pixel {:?} became {:?}", a, b);
                }
            }
        }
    }

    #[test]
    fn white_pixels_stay_white() {
        let (h, e) = (reference_h(), reference_e());
        let mut rng = StdRng::seed_from_u64(29);
        let mut concs = synth_concentrations(&mut rng, 64 * 64);
        // Force a white corner.
        concs[0] = (0.0, 0.0);
        let img = synth_image(h, e, &concs, 64);
        let target = fit_stain_profile(&img, &MacenkoParams::default()).unwrap();
        let out = normalize(&img, &target).unwrap();
        assert_eq!(*out.get_pixel(0, 0), Rgb([255, 255, 255]));
    }

    #[test]
    fn normalizing_two_sources_aligns_concentration_ceilings() {
        let mut rng = StdRng::seed_from_u64(41);
        let img_a = synth_image(
            reference_h(),
            reference_e(),
            &synth_concentrations(&mut rng, 96 * 96),
            96,
        );
        let img_b = synth_image(
            unit([0.55, 0.75, 0.37]),
            unit([0.12, 0.95, 0.20]),
            &synth_concentrations(&mut rng, 96 * 96),
            96,
        );
        let target = StainProfile::new(
            Matrix3x2::from_columns(&[reference_h(), reference_e()]),
            [1.1, 0.9],
            "target",
        )
        .unwrap();
        let params = MacenkoParams::default();
        let out_a = normalize(&img_a, &target).unwrap();
        let out_b = normalize(&img_b, &target).unwrap();
        let ceil = |img: &RgbImage| {
            let fitted = fit_stain_profile(img, &params).unwrap();
            fitted.max_conc()
        };
        let (ca, cb) = (ceil(&out_a), ceil(&out_b));
        for ch in 0..2 {
            let rel = (ca[ch] - cb[ch]).abs() / ca[ch].max(cb[ch]);
            assert!(rel <= 0.02, "channel {ch}: {ca:?} vs {cb:?}");
        }
    }

    fn small_bank_inputs(count: usize, white: usize) -> Vec<(String, RgbImage)> {
        let mut rng = StdRng::seed_from_u64(99);
        (0..count)
            .map(|i| {
                let img = if i < white {
                    RgbImage::from_pixel(40, 40, Rgb([255, 255, 255]))
                } else {
                    let h = unit([
                        0.60 + rng.random_range(-0.05..0.05),
                        0.70 + rng.random_range(-0.05..0.05),
                        0.30 + rng.random_range(-0.05..0.05),
                    ]);
                    let e = unit([
                        0.10 + rng.random_range(-0.03..0.03),
                        0.95,
                        0.15 + rng.random_range(-0.03..0.03),
                    ]);
                    let concs = synth_concentrations(&mut rng, 40 * 40);
                    synth_image(h, e, &concs, 40)
                };
                (format!("roi-{i:03}"), img)
            })
            .collect()
    }

    #[test]
    fn bank_of_50_profiles() {
        let inputs = small_bank_inputs(50, 0);
        let bank = build_bank(&inputs, 50).unwrap();
        assert_eq!(bank.profiles().len(), 50);
        assert_eq!(bank.apply_probability(), DEFAULT_APPLY_PROBABILITY);
        assert_eq!(bank.profiles()[7].source_roi(), "roi-007");
    }

    #[test]
    fn duplicate_roi_id_rejected() {
        let mut inputs = small_bank_inputs(3, 0);
        inputs[2].0 = inputs[0].0.clone();
        assert!(matches!(
            build_bank(&inputs, 3),
            Err(StainError::DuplicateRoiId(_))
        ));
    }

    #[test]
    fn failed_fits_are_skipped() {
        let inputs = small_bank_inputs(50, 10);
        let bank = build_bank(&inputs, 50).unwrap();
        assert_eq!(bank.profiles().len(), 40);
    }

    #[test]
    fn too_many_failures_error() {
        let inputs = small_bank_inputs(50, 30);
        assert!(matches!(
            build_bank(&inputs, 50),
            Err(StainError::BankTooSmall { kept: 20, requested: 50 })
        ));
    }

    #[test]
    fn bank_json_round_trip() {
        let inputs = small_bank_inputs(4, 0);
        let bank = build_bank(&inputs, 4).unwrap();
        let json = bank.to_json();
        let parsed = serde_json::to_value(serde_json::from_str::<serde_json::Value>(&json).unwrap())
            .unwrap();
        assert_eq!(parsed["profiles"][0]["stain_matrix"].as_array().unwrap().len(), 9);
        assert_eq!(parsed["profiles"][0]["max_conc"].as_array().unwrap().len(), 2);
        let back = StainBank::from_json(&json).unwrap();
        for (a, b) in bank.profiles().iter().zip(back.profiles()) {
            assert_eq!(a.source_roi(), b.source_roi());
            assert!((a.stain_matrix() - b.stain_matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_never_applies() {
        let inputs = small_bank_inputs(2, 0);
        let bank = build_bank(&inputs, 2)
            .unwrap()
            .with_apply_probability(0.0)
            .unwrap();
        let img = inputs[0].1.clone();
        let mut rng = stream(3, StreamLabel::StainApply, 0);
        for _ in 0..50 {
            let (out, applied) = stochastic_apply(&img, &bank, &mut rng);
            assert!(applied.is_none());
            assert_eq!(out, img);
        }
    }

    #[test]
    fn unit_probability_single_profile_always_applies() {
        let inputs = small_bank_inputs(1, 0);
        let bank = build_bank(&inputs, 1)
            .unwrap()
            .with_apply_probability(1.0)
            .unwrap();
        let mut rng = stream(3, StreamLabel::StainApply, 0);
        for _ in 0..10 {
            let (_, applied) = stochastic_apply(&inputs[0].1, &bank, &mut rng);
            assert_eq!(applied.as_deref(), Some("roi-000"));
        }
    }

    #[test]
    fn application_frequency_matches_probability() {
        // Tiny tissue image keeps 10k draws cheap.
        let inputs = small_bank_inputs(2, 0);
        let bank = build_bank(&inputs, 2).unwrap();
        let img = {
            let mut rng = StdRng::seed_from_u64(7);
            let concs = synth_concentrations(&mut rng, 144);
            synth_image(reference_h(), reference_e(), &concs, 12)
        };
        let mut applied = 0u32;
        for tile in 0..10_000u64 {
            let mut rng = stream(1234, StreamLabel::StainApply, tile);
            if stochastic_apply(&img, &bank, &mut rng).1.is_some() {
                applied += 1;
            }
        }
        let freq = applied as f64 / 10_000.0;
        assert!((0.238..=0.262).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn per_tile_decisions_reproducible() {
        let inputs = small_bank_inputs(3, 0);
        let bank = build_bank(&inputs, 3).unwrap();
        let img = inputs[0].1.clone();
        let run = || -> Vec<Option<String>> {
            (0..64u64)
                .map(|tile| {
                    let mut rng = stream(77, StreamLabel::StainApply, tile);
                    stochastic_apply(&img, &bank, &mut rng).1
                })
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stain_columns_unit_and_nonnegative_after_fit() {
        let mut rng = StdRng::seed_from_u64(63);
        for seed in 0..5u64 {
            let h = unit([
                0.55 + rng.random_range(0.0..0.15),
                0.65 + rng.random_range(0.0..0.15),
                0.25 + rng.random_range(0.0..0.15),
            ]);
            let e = unit([0.05 + rng.random_range(0.0..0.1), 0.95, 0.12]);
            let mut crng = StdRng::seed_from_u64(seed);
            let img = synth_image(h, e, &synth_concentrations(&mut crng, 64 * 64), 64);
            let profile = fit_stain_profile(&img, &MacenkoParams::default()).unwrap();
            for c in 0..2 {
                let col = profile.stain_matrix().column(c);
                assert!((col.norm() - 1.0).abs() < 1e-9);
                assert!(col.iter().all(|&v| v >= 0.0));
            }
            assert!(profile.max_conc().iter().all(|&v| v > 0.0));
        }
    }
}
