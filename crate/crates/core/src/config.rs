//! The experiment configuration: one JSON document that drives every
//! subcommand. A persisted resolved snapshot re-runs to identical outputs
//! under the determinism contracts of the individual modules.

use crate::contrastive::LossConfig;
use crate::encoder::{EncoderConfig, StyleMode};
use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::synth::{CohortSpec, DomainParams, ProfileJitter, SplitSpec};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingConfig {
    /// Number of visual words.
    pub k1: usize,
    /// Number of pseudo-domains.
    pub k: usize,
    pub style_mode: StyleMode,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            k1: 16,
            k: 2,
            style_mode: StyleMode::EarlyConv,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Global seed; all component seeds derive from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub cohort: CohortSpec,
    pub encoder: EncoderConfig,
    pub grouping: GroupingConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// K values tried by `sweep-k`.
    pub sweep_ks: Vec<usize>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: a 20-WSI cohort over three appearance profiles
    /// with the third profile held out as the unseen test domain.
    pub fn desk_default() -> Self {
        let profiles = vec![
            DomainParams {
                stain_hue_shift: -40.0,
                brightness_scale: 1.0,
                contrast_scale: 1.0,
                noise_sigma: 4.0,
                texture_seed: 0,
            },
            DomainParams {
                stain_hue_shift: 5.0,
                brightness_scale: 0.85,
                contrast_scale: 1.1,
                noise_sigma: 6.0,
                texture_seed: 0,
            },
            DomainParams {
                stain_hue_shift: 75.0,
                brightness_scale: 1.1,
                contrast_scale: 0.95,
                noise_sigma: 5.0,
                texture_seed: 0,
            },
        ];
        ExperimentConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            cohort: CohortSpec {
                n_wsis: 20,
                width_px: 1024,
                height_px: 1024,
                tumor_fraction_target: 0.35,
                n_tumor_blobs: 1,
                profiles,
                per_profile_counts: vec![7, 7, 6],
                jitter: ProfileJitter::default(),
                split: SplitSpec::HoldOutProfile {
                    test_profile: 2,
                    val_fraction: 0.3,
                },
            },
            encoder: EncoderConfig {
                embed_dim: 64,
                proj_hidden: 64,
                ..Default::default()
            },
            // Desk-scale WSIs yield a handful of non-tumor patches each;
            // histograms over the default 16 words would be too sparse.
            grouping: GroupingConfig {
                k1: 6,
                style_mode: StyleMode::ColorStats,
                ..Default::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 12,
                ..Default::default()
            },
            sweep_ks: vec![2, 4, 6, 8, 10],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.grouping.k1 == 0 || self.grouping.k == 0 {
            return Err(Error::invalid("grouping.k1 and grouping.k must be >= 1"));
        }
        Ok(())
    }

    /// Stable per-component seeds derived from the global one.
    pub fn encoder_seed(&self) -> u64 {
        derive_seed(self.seed, "encoder", 0)
    }

    pub fn cohort_seed(&self) -> u64 {
        derive_seed(self.seed, "cohort", 0)
    }

    pub fn codebook_seed(&self) -> u64 {
        derive_seed(self.seed, "codebook", 0)
    }

    pub fn cluster_seed(&self) -> u64 {
        derive_seed(self.seed, "cluster", 0)
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "train", 0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&raw).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Resolved-config snapshot written beside a subcommand's outputs.
    pub fn write_snapshot(&self, subcommand: &str) -> Result<PathBuf> {
        let path = self
            .out_dir
            .join(format!("{subcommand}_config_snapshot.json"));
        self.save(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::desk_default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, cfg.seed);
        assert_eq!(loaded.cohort.n_wsis, cfg.cohort.n_wsis);
        assert_eq!(loaded.grouping.k1, cfg.grouping.k1);
    }

    #[test]
    fn component_seeds_are_distinct_and_stable() {
        let cfg = ExperimentConfig::desk_default();
        let seeds = [
            cfg.encoder_seed(),
            cfg.cohort_seed(),
            cfg.codebook_seed(),
            cfg.cluster_seed(),
            cfg.train_seed(),
        ];
        let mut uniq = seeds.to_vec();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), seeds.len());
        assert_eq!(cfg.encoder_seed(), ExperimentConfig::desk_default().encoder_seed());
    }
}
