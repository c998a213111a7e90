//! Synthetic whole-slide images with ground-truth tumor masks and
//! controllable per-WSI appearance parameters.
//!
//! Appearance factors (stain hue, brightness, contrast, noise) are applied
//! uniformly across a WSI, never per patch, so that any two patches tiled
//! from one slide share the same shift.

pub mod texture;

use crate::error::{Error, Result};
use crate::img::{self, rgb_to_hsv};
use crate::seeding::{derive_seed, rng_from};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use texture::{content_variant, Blob, NON_TUMOR_VARIANTS, TUMOR_TEXTURE};

/// Per-WSI appearance parameters. Uniform across the whole slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Stain hue rotation in degrees, in [-180, 180].
    pub stain_hue_shift: f64,
    /// Multiplicative brightness (tissue thickness proxy), > 0.
    pub brightness_scale: f64,
    /// Contrast around mid-gray, > 0.
    pub contrast_scale: f64,
    /// Additive Gaussian pixel noise, sigma in 8-bit intensity units, >= 0.
    pub noise_sigma: f64,
    /// Seed for the procedural tissue layout of this slide.
    pub texture_seed: u64,
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        if self.brightness_scale <= 0.0 {
            return Err(Error::invalid("brightness_scale must be > 0"));
        }
        if self.contrast_scale <= 0.0 {
            return Err(Error::invalid("contrast_scale must be > 0"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if !(-180.0..=180.0).contains(&self.stain_hue_shift) {
            return Err(Error::invalid("stain_hue_shift must be in [-180, 180]"));
        }
        Ok(())
    }
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams {
            stain_hue_shift: 0.0,
            brightness_scale: 1.0,
            contrast_scale: 1.0,
            noise_sigma: 0.0,
            texture_seed: 0,
        }
    }
}

/// Geometry and content request for one synthetic WSI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWsiSpec {
    pub width_px: usize,
    pub height_px: usize,
    /// Desired tumor area fraction in [0, 1].
    pub tumor_fraction_target: f64,
    pub n_tumor_blobs: usize,
    pub domain: DomainParams,
}

impl SyntheticWsiSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width_px", self.width_px), ("height_px", self.height_px)] {
            if v < 256 || v % 256 != 0 {
                return Err(Error::invalid(format!(
                    "{name} must be a multiple of 256 and >= 256, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction_target) {
            return Err(Error::invalid("tumor_fraction_target must be in [0, 1]"));
        }
        if self.tumor_fraction_target == 0.0 && self.n_tumor_blobs != 0 {
            return Err(Error::invalid(
                "tumor_fraction_target = 0 requires n_tumor_blobs = 0",
            ));
        }
        self.domain.validate()
    }
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One synthetic slide with its ground truth.
#[derive(Debug, Clone)]
pub struct WsiRecord {
    pub wsi_id: String,
    /// (H, W, 3) 8-bit pixels.
    pub image: Array3<u8>,
    /// (H, W) labels, 0 = non-tumor, 1 = tumor.
    pub mask: Array2<u8>,
    pub domain: DomainParams,
    pub split: Split,
}

/// Generation output: the record plus fraction diagnostics.
#[derive(Debug, Clone)]
pub struct GeneratedWsi {
    pub record: WsiRecord,
    /// Tumor pixels / total pixels actually achieved.
    pub achieved_tumor_fraction: f64,
    /// Set when the target fraction could not be reached with the requested blobs.
    pub fraction_warning: Option<String>,
}

/// Generate one synthetic WSI. Pure function of `(spec, seed)`.
pub fn generate_wsi(spec: &SyntheticWsiSpec, seed: u64) -> Result<GeneratedWsi> {
    let id = format!("wsi-{:012x}", derive_seed(seed, "wsi-id", 0) & 0xffff_ffff_ffff);
    generate_wsi_with_id(spec, seed, &id, Split::Train)
}

pub(crate) fn generate_wsi_with_id(
    spec: &SyntheticWsiSpec,
    seed: u64,
    wsi_id: &str,
    split: Split,
) -> Result<GeneratedWsi> {
    spec.validate()?;
    let (h, w) = (spec.height_px, spec.width_px);

    let (mask, achieved, warning) = build_mask(spec, seed);
    let image = render_image(spec, seed, &mask);

    Ok(GeneratedWsi {
        record: WsiRecord {
            wsi_id: wsi_id.to_string(),
            image,
            mask,
            domain: spec.domain.clone(),
            split,
        },
        achieved_tumor_fraction: achieved / (h * w) as f64,
        fraction_warning: warning,
    })
}

/// Place blobs, then bisect a global radius scale until the rasterized tumor
/// fraction meets the target. Monotone in the scale, so bisection converges.
fn build_mask(spec: &SyntheticWsiSpec, seed: u64) -> (Array2<u8>, f64, Option<String>) {
    let (h, w) = (spec.height_px, spec.width_px);
    let mut mask = Array2::<u8>::zeros((h, w));
    let target = spec.tumor_fraction_target;

    if spec.n_tumor_blobs == 0 || target == 0.0 {
        let warning = (target > 0.0).then(|| {
            format!("tumor_fraction_target {target} unreachable with 0 blobs; achieved 0")
        });
        return (mask, 0.0, warning);
    }

    let mut rng = rng_from(derive_seed(seed, "blobs", spec.domain.texture_seed));
    let total_px = (h * w) as f64;
    let base_r = (target * total_px / (std::f64::consts::PI * spec.n_tumor_blobs as f64)).sqrt();
    let blobs: Vec<Blob> = (0..spec.n_tumor_blobs)
        .map(|_| Blob {
            cx: rng.gen_range(0.25 * w as f64..0.75 * w as f64),
            cy: rng.gen_range(0.25 * h as f64..0.75 * h as f64),
            r: base_r * rng.gen_range(0.8..1.2),
            wobble3_amp: rng.gen_range(0.04..0.10),
            wobble3_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            wobble5_amp: rng.gen_range(0.02..0.06),
            wobble5_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();

    let r_worst = blobs
        .iter()
        .map(|b| b.max_radius(1.0))
        .fold(f64::MIN, f64::max);
    let s_max = 0.45 * h.min(w) as f64 / r_worst;

    let count = |mask: &mut Array2<u8>, s: f64| -> usize {
        mask.fill(0);
        for b in &blobs {
            let rmax = b.max_radius(s).ceil() as i64;
            let y0 = ((b.cy as i64) - rmax).max(0) as usize;
            let y1 = (((b.cy as i64) + rmax + 1).max(0) as usize).min(h);
            let x0 = ((b.cx as i64) - rmax).max(0) as usize;
            let x1 = (((b.cx as i64) + rmax + 1).max(0) as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    if mask[[y, x]] == 0 && b.contains(x as f64, y as f64, s) {
                        mask[[y, x]] = 1;
                    }
                }
            }
        }
        mask.iter().filter(|&&v| v == 1).count()
    };

    let frac_at_max = count(&mut mask, s_max) as f64 / total_px;
    if frac_at_max < target {
        let warning = format!(
            "tumor_fraction_target {target} unreachable with {} blobs; achieved {frac_at_max:.4}",
            spec.n_tumor_blobs
        );
        return (mask, frac_at_max * total_px, Some(warning));
    }

    let (mut lo, mut hi) = (0.0f64, s_max);
    for _ in 0..16 {
        let mid = 0.5 * (lo + hi);
        let f = count(&mut mask, mid) as f64 / total_px;
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let achieved = count(&mut mask, hi) as f64;
    (mask, achieved, None)
}

/// Compose the two class textures under the mask, then apply the domain
/// transform to the whole image in the fixed order
/// hue shift -> brightness -> contrast -> noise.
fn render_image(spec: &SyntheticWsiSpec, seed: u64, mask: &Array2<u8>) -> Array3<u8> {
    let (h, w) = mask.dim();
    let d = &spec.domain;
    let tumor_seed = derive_seed(d.texture_seed, "tumor-texture", 0);
    let non_tumor_seed = derive_seed(d.texture_seed, "non-tumor-texture", 0);
    let mut noise_rng = rng_from(derive_seed(seed, "pixel-noise", 0));
    let normal = Normal::new(0.0, (d.noise_sigma / 255.0).max(f64::MIN_POSITIVE)).unwrap();

    let mut image = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (mut r, mut g, mut b) = if mask[[y, x]] == 1 {
                TUMOR_TEXTURE.shade(tumor_seed, x, y)
            } else {
                let variant = content_variant(d.texture_seed, x, y);
                NON_TUMOR_VARIANTS[variant].shade(non_tumor_seed ^ (variant as u64) << 56, x, y)
            };
            if d.stain_hue_shift != 0.0 {
                let (hue, s, v) = rgb_to_hsv(r, g, b);
                let (r2, g2, b2) = img::hsv_to_rgb(hue + d.stain_hue_shift, s, v);
                (r, g, b) = (r2, g2, b2);
            }
            r *= d.brightness_scale;
            g *= d.brightness_scale;
            b *= d.brightness_scale;
            r = (r - 0.5) * d.contrast_scale + 0.5;
            g = (g - 0.5) * d.contrast_scale + 0.5;
            b = (b - 0.5) * d.contrast_scale + 0.5;
            if d.noise_sigma > 0.0 {
                r += normal.sample(&mut noise_rng);
                g += normal.sample(&mut noise_rng);
                b += normal.sample(&mut noise_rng);
            }
            image[[y, x, 0]] = (r.clamp(0.0, 1.0) * 255.0).round() as u8;
            image[[y, x, 1]] = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
            image[[y, x, 2]] = (b.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    image
}

/// Random per-WSI perturbation of a profile's parameters. Keeps clusters
/// discoverable without being trivially separable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileJitter {
    pub hue_deg: f64,
    pub brightness_frac: f64,
    pub contrast_frac: f64,
}

impl Default for ProfileJitter {
    fn default() -> Self {
        ProfileJitter {
            hue_deg: 5.0,
            brightness_frac: 0.05,
            contrast_frac: 0.05,
        }
    }
}

/// How cohort WSIs are assigned to train/val/test.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Random assignment by fraction; test gets the remainder.
    Fractions { train: f64, val: f64 },
    /// All WSIs of one profile become the test split; the rest are split
    /// into train and val. This is the held-out-domain protocol.
    HoldOutProfile { test_profile: usize, val_fraction: f64 },
}

/// Full request for a synthetic cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_wsis: usize,
    pub width_px: usize,
    pub height_px: usize,
    pub tumor_fraction_target: f64,
    pub n_tumor_blobs: usize,
    pub profiles: Vec<DomainParams>,
    pub per_profile_counts: Vec<usize>,
    #[serde(default)]
    pub jitter: ProfileJitter,
    pub split: SplitSpec,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::invalid("profiles must be nonempty"));
        }
        if self.profiles.len() != self.per_profile_counts.len() {
            return Err(Error::invalid(format!(
                "per_profile_counts has {} entries for {} profiles",
                self.per_profile_counts.len(),
                self.profiles.len()
            )));
        }
        let total: usize = self.per_profile_counts.iter().sum();
        if total != self.n_wsis {
            return Err(Error::invalid(format!(
                "per_profile_counts sums to {total}, expected n_wsis = {}",
                self.n_wsis
            )));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        match &self.split {
            SplitSpec::Fractions { train, val } => {
                if *train < 0.0 || *val < 0.0 || train + val > 1.0 {
                    return Err(Error::invalid("split fractions must be >= 0 and sum <= 1"));
                }
            }
            SplitSpec::HoldOutProfile { test_profile, val_fraction } => {
                if *test_profile >= self.profiles.len() {
                    return Err(Error::invalid(format!(
                        "test_profile {test_profile} out of range for {} profiles",
                        self.profiles.len()
                    )));
                }
                if !(0.0..=1.0).contains(val_fraction) {
                    return Err(Error::invalid("val_fraction must be in [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Manifest row for one cohort WSI. `profile_index` is the hidden ground
/// truth used to score pseudo-domain recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortEntry {
    pub wsi_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub profile_index: usize,
    pub split: Split,
    pub domain_params: DomainParams,
    pub achieved_tumor_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction_warning: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub entries: Vec<CohortEntry>,
}

#[derive(Debug)]
pub struct Cohort {
    pub wsis: Vec<GeneratedWsi>,
    pub manifest: CohortManifest,
}

/// Generate a cohort: each WSI drawn from exactly one profile with small
/// intra-profile jitter. Pure function of `(spec, seed)`.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<Cohort> {
    spec.validate()?;

    let mut jitter_rng = rng_from(derive_seed(seed, "cohort-jitter", 0));
    let mut wsi_specs = Vec::with_capacity(spec.n_wsis);
    for (profile_idx, &count) in spec.per_profile_counts.iter().enumerate() {
        for _ in 0..count {
            let base = &spec.profiles[profile_idx];
            let j = &spec.jitter;
            let domain = DomainParams {
                stain_hue_shift: (base.stain_hue_shift
                    + jitter_rng.gen_range(-j.hue_deg..=j.hue_deg))
                .clamp(-180.0, 180.0),
                brightness_scale: base.brightness_scale
                    * (1.0 + jitter_rng.gen_range(-j.brightness_frac..=j.brightness_frac)),
                contrast_scale: base.contrast_scale
                    * (1.0 + jitter_rng.gen_range(-j.contrast_frac..=j.contrast_frac)),
                noise_sigma: base.noise_sigma,
                texture_seed: jitter_rng.gen(),
            };
            wsi_specs.push((profile_idx, domain));
        }
    }

    let splits = assign_splits(spec, &wsi_specs, seed);

    let generated: Result<Vec<GeneratedWsi>> = wsi_specs
        .par_iter()
        .enumerate()
        .map(|(i, (_, domain))| {
            let one = SyntheticWsiSpec {
                width_px: spec.width_px,
                height_px: spec.height_px,
                tumor_fraction_target: spec.tumor_fraction_target,
                n_tumor_blobs: spec.n_tumor_blobs,
                domain: domain.clone(),
            };
            generate_wsi_with_id(
                &one,
                derive_seed(seed, "cohort-wsi", i as u64),
                &format!("wsi_{i:04}"),
                splits[i],
            )
        })
        .collect();
    let generated = generated?;

    let entries = generated
        .iter()
        .zip(&wsi_specs)
        .map(|(g, (profile_idx, _))| CohortEntry {
            wsi_id: g.record.wsi_id.clone(),
            image_path: format!("images/{}.png", g.record.wsi_id),
            mask_path: format!("masks/{}.png", g.record.wsi_id),
            profile_index: *profile_idx,
            split: g.record.split,
            domain_params: g.record.domain.clone(),
            achieved_tumor_fraction: g.achieved_tumor_fraction,
            fraction_warning: g.fraction_warning.clone(),
        })
        .collect();

    Ok(Cohort {
        wsis: generated,
        manifest: CohortManifest { seed, entries },
    })
}

fn assign_splits(spec: &CohortSpec, wsi_specs: &[(usize, DomainParams)], seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let n = wsi_specs.len();
    let mut splits = vec![Split::Train; n];
    let mut rng = rng_from(derive_seed(seed, "split", 0));
    match &spec.split {
        SplitSpec::Fractions { train, val } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_train = (train * n as f64).round() as usize;
            let n_val = ((val * n as f64).round() as usize).min(n - n_train.min(n));
            for (pos, &i) in order.iter().enumerate() {
                splits[i] = if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        SplitSpec::HoldOutProfile { test_profile, val_fraction } => {
            // Val assignment is stratified per profile so no training
            // profile ends up underrepresented by shuffle luck.
            let mut by_profile: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, (p, _)) in wsi_specs.iter().enumerate() {
                if p == test_profile {
                    splits[i] = Split::Test;
                } else {
                    by_profile.entry(*p).or_default().push(i);
                }
            }
            for (_, mut members) in by_profile {
                members.shuffle(&mut rng);
                let n_val = (val_fraction * members.len() as f64).round() as usize;
                for (pos, &i) in members.iter().enumerate() {
                    splits[i] = if pos < n_val { Split::Val } else { Split::Train };
                }
            }
        }
    }
    splits
}

/// Write images, masks, and `manifest.json` under `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (wsi, entry) in cohort.wsis.iter().zip(&cohort.manifest.entries) {
        img::save_rgb_png(&dir.join(&entry.image_path), &wsi.record.image)?;
        img::save_mask_png(&dir.join(&entry.mask_path), &wsi.record.mask)?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&cohort.manifest)
        .map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

/// Load a cohort previously written by [`write_cohort`].
pub fn load_cohort(dir: &Path) -> Result<(Vec<WsiRecord>, CohortManifest)> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CohortManifest =
        serde_json::from_str(&raw).map_err(|e| Error::json(&manifest_path, e))?;
    let mut records = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let image = img::load_rgb_png(&dir.join(&entry.image_path))?;
        let mask = img::load_mask_png(&dir.join(&entry.mask_path))?;
        if image.dim().0 != mask.dim().0 || image.dim().1 != mask.dim().1 {
            return Err(Error::invalid(format!(
                "{}: image and mask dimensions differ",
                entry.wsi_id
            )));
        }
        records.push(WsiRecord {
            wsi_id: entry.wsi_id.clone(),
            image,
            mask,
            domain: entry.domain_params.clone(),
            split: entry.split,
        });
    }
    Ok((records, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(frac: f64, blobs: usize) -> SyntheticWsiSpec {
        SyntheticWsiSpec {
            width_px: 512,
            height_px: 512,
            tumor_fraction_target: frac,
            n_tumor_blobs: blobs,
            domain: DomainParams {
                stain_hue_shift: 10.0,
                brightness_scale: 1.0,
                contrast_scale: 1.0,
                noise_sigma: 3.0,
                texture_seed: 7,
            },
        }
    }

    #[test]
    fn zero_target_gives_all_zero_mask() {
        let g = generate_wsi(&spec(0.0, 0), 1).unwrap();
        assert!(g.record.mask.iter().all(|&v| v == 0));
        assert_eq!(g.achieved_tumor_fraction, 0.0);
        assert!(g.fraction_warning.is_none());
    }

    #[test]
    fn same_inputs_reproduce_bit_identical_output() {
        let a = generate_wsi(&spec(0.3, 3), 42).unwrap();
        let b = generate_wsi(&spec(0.3, 3), 42).unwrap();
        assert_eq!(a.record.image, b.record.image);
        assert_eq!(a.record.mask, b.record.mask);
        assert_eq!(a.record.wsi_id, b.record.wsi_id);
    }

    #[test]
    fn achieved_fraction_matches_pixel_count_oracle() {
        let s = SyntheticWsiSpec {
            width_px: 1024,
            height_px: 1024,
            tumor_fraction_target: 0.25,
            n_tumor_blobs: 4,
            domain: DomainParams::default(),
        };
        let g = generate_wsi(&s, 3).unwrap();
        let ones = g.record.mask.iter().filter(|&&v| v == 1).count();
        let oracle = ones as f64 / (1024.0 * 1024.0);
        assert!((g.achieved_tumor_fraction - oracle).abs() < 1e-12);
        assert!(
            (oracle - 0.25).abs() <= 0.10,
            "achieved fraction {oracle} too far from 0.25"
        );
    }

    #[test]
    fn non_multiple_dimension_rejected() {
        let mut s = spec(0.2, 2);
        s.width_px = 300;
        assert!(generate_wsi(&s, 1).is_err());
    }

    #[test]
    fn unreachable_fraction_sets_warning() {
        let g = generate_wsi(&spec(0.9, 1), 5).unwrap();
        // One blob capped at 45% of the short side cannot tile 90% of the area.
        assert!(g.fraction_warning.is_some());
        assert!(g.achieved_tumor_fraction < 0.9);
    }

    #[test]
    fn mask_values_are_binary_and_dims_match() {
        let g = generate_wsi(&spec(0.3, 3), 9).unwrap();
        assert!(g.record.mask.iter().all(|&v| v <= 1));
        assert_eq!(g.record.image.dim().0, g.record.mask.dim().0);
        assert_eq!(g.record.image.dim().1, g.record.mask.dim().1);
    }

    fn cohort_spec() -> CohortSpec {
        CohortSpec {
            n_wsis: 4,
            width_px: 256,
            height_px: 256,
            tumor_fraction_target: 0.3,
            n_tumor_blobs: 2,
            profiles: vec![
                DomainParams { stain_hue_shift: -30.0, ..Default::default() },
                DomainParams { stain_hue_shift: 40.0, ..Default::default() },
            ],
            per_profile_counts: vec![2, 2],
            jitter: ProfileJitter::default(),
            split: SplitSpec::Fractions { train: 0.5, val: 0.25 },
        }
    }

    #[test]
    fn cohort_counts_profiles_exactly() {
        let cohort = generate_cohort(&cohort_spec(), 11).unwrap();
        let per_profile = |p: usize| {
            cohort
                .manifest
                .entries
                .iter()
                .filter(|e| e.profile_index == p)
                .count()
        };
        assert_eq!(per_profile(0), 2);
        assert_eq!(per_profile(1), 2);
    }

    #[test]
    fn degenerate_single_profile_cohort() {
        let mut s = cohort_spec();
        s.per_profile_counts = vec![4, 0];
        let cohort = generate_cohort(&s, 11).unwrap();
        assert!(cohort.manifest.entries.iter().all(|e| e.profile_index == 0));
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut s = cohort_spec();
        s.per_profile_counts = vec![3, 2];
        assert!(generate_cohort(&s, 11).is_err());
    }

    #[test]
    fn holdout_profile_split_sends_profile_to_test() {
        let mut s = cohort_spec();
        s.split = SplitSpec::HoldOutProfile { test_profile: 1, val_fraction: 0.5 };
        let cohort = generate_cohort(&s, 11).unwrap();
        for e in &cohort.manifest.entries {
            if e.profile_index == 1 {
                assert_eq!(e.split, Split::Test);
            } else {
                assert_ne!(e.split, Split::Test);
            }
        }
    }

    #[test]
    fn cohort_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate_cohort(&cohort_spec(), 11).unwrap();
        write_cohort(&cohort, dir.path()).unwrap();
        let (records, manifest) = load_cohort(dir.path()).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(manifest.entries.len(), 4);
        for (loaded, orig) in records.iter().zip(&cohort.wsis) {
            assert_eq!(loaded.image, orig.record.image);
            assert_eq!(loaded.mask, orig.record.mask);
            assert_eq!(loaded.split, orig.record.split);
        }
    }
}
