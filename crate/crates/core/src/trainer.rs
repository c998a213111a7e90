//! The optimization loop: cross-cluster pair batches, the combined
//! objective, plain SGD, per-epoch checkpoints, and K selection by
//! validation macro-F1.

use crate::bovw::{cluster_wsis, BovwVector, PseudoDomainAssignment};
use crate::contrastive::{
    class_prototypes, cross_entropy_with_grad, patch_level_loss_grad, wsi_level_loss_grad,
    LossConfig, PairSpec,
};
use crate::encoder::{ensure_dir, save_checkpoint, Encoder, EncoderConfig, RngState};
use crate::error::{Error, Result};
use crate::eval::evaluate_patches;
use crate::patch::{Label, PatchDataset};
use crate::sampler::{sample_batch, PairMode, BATCH_SIZE};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng_from};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// Table-1-style training modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// WSI-pair batches, L_w + L_p + L_c.
    Full,
    /// Uniform batches, cross-entropy only.
    BaselineCe,
    /// Uniform batches, cross-entropy plus class-wise supervised
    /// contrastive loss; no WSI pairing, no WSI-level term.
    BaselineCeSupcon,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Full => write!(f, "full"),
            TrainMode::BaselineCe => write!(f, "baseline_ce"),
            TrainMode::BaselineCeSupcon => write!(f, "baseline_ce_supcon"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// SGD step size.
    pub learning_rate: f64,
    pub epochs: usize,
    /// Defaults to ceil(#train WSIs / 2) when absent.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub mode: TrainMode,
    #[serde(default)]
    pub pair_mode: PairMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            mode: TrainMode::Full,
            pair_mode: PairMode::CrossCluster,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss_wsi: f64,
    pub loss_patch: f64,
    pub loss_ce: f64,
    pub total: f64,
    pub empty_pos: usize,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// The selected (best validation macro-F1) model.
    pub encoder: Encoder<T>,
    /// 0 = the untrained initialization.
    pub best_epoch: usize,
    pub best_val_macro_f1: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub log: Vec<StepLog>,
    /// (epoch, validation macro-F1), including epoch 0.
    pub val_history: Vec<(usize, f64)>,
    pub log_path: PathBuf,
}

pub struct TrainerInputs<'a, T: Scalar> {
    pub encoder: Encoder<T>,
    pub train: &'a PatchDataset,
    /// Validation patches for model selection; `None` selects the last epoch.
    pub val: Option<&'a PatchDataset>,
    /// Pixels for every patch id in `train` and `val`.
    pub images: &'a BTreeMap<String, Array3<u8>>,
    pub assignment: Option<&'a PseudoDomainAssignment>,
}

/// Persisted when a step produces a non-finite loss, for replay.
#[derive(Debug, Serialize, Deserialize)]
struct ReplayBatch {
    step: usize,
    epoch: usize,
    patch_ids: Vec<String>,
    labels: Vec<Label>,
    wsi_ids: Vec<String>,
}

pub fn train<T: Scalar>(
    inputs: TrainerInputs<'_, T>,
    config: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    loss_cfg.validate()?;
    let TrainerInputs {
        mut encoder,
        train,
        val,
        images,
        assignment,
    } = inputs;
    if train.records.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if config.mode == TrainMode::Full && assignment.is_none() {
        return Err(Error::invalid("full mode requires a pseudo-domain assignment"));
    }

    ensure_dir(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");
    ensure_dir(&ckpt_dir)?;

    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| train.index.len().div_ceil(2))
        .max(1);
    let lr = T::from_f64_c(config.learning_rate);
    let mut rng = rng_from(derive_seed(config.seed, "trainer", 0));

    // Preprocess every needed patch once; pure per-pixel work, done in
    // parallel with a deterministic result.
    let prepped = preprocess_all(&encoder, train, val, images)?;

    let mut log: Vec<StepLog> = Vec::new();
    let mut val_history: Vec<(usize, f64)> = Vec::new();
    let mut best: (usize, f64, PathBuf) = (0, f64::NEG_INFINITY, PathBuf::new());

    // Epoch 0: the untrained model, so improvement over initialization is
    // visible in the history.
    let epoch0_path = ckpt_dir.join("epoch_000.ckpt");
    save_checkpoint(&encoder, &RngState::capture(&rng), &epoch0_path)?;
    if let Some(val_ds) = val {
        let m = evaluate_patches(&encoder, val_ds, images)?;
        val_history.push((0, m.macro_f1));
        best = (0, m.macro_f1, epoch0_path);
    }

    let mut step_counter = 0usize;
    for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            step_counter += 1;
            let (ids, labels, wsi_ids) = match config.mode {
                TrainMode::Full => {
                    let spec = sample_batch(
                        train,
                        assignment.expect("checked above"),
                        config.pair_mode,
                        &mut rng,
                    )?;
                    spec.flatten()
                }
                TrainMode::BaselineCe | TrainMode::BaselineCeSupcon => {
                    uniform_batch(train, &mut rng)
                }
            };

            let refs: Vec<&Array3<T>> = ids.iter().map(|id| &prepped[id]).collect();
            let cache = encoder.forward_train(&refs);

            let (ww, wp, wc) = loss_cfg.weights;
            let mut grad_v = Array2::<T>::zeros(cache.embeddings.dim());
            let mut loss_wsi = 0.0;
            let mut loss_patch = 0.0;
            let mut empty_pos = 0usize;

            if config.mode == TrainMode::Full {
                let protos = class_prototypes(cache.embeddings.view(), &labels, &wsi_ids)?;
                let (lw, diag) = wsi_level_loss_grad(
                    &protos,
                    cache.embeddings.view(),
                    loss_cfg,
                    T::from_f64_c(ww),
                    &mut grad_v,
                )?;
                loss_wsi = lw.to_f64().unwrap();
                empty_pos += diag.empty_positive_anchors;
            }
            if matches!(config.mode, TrainMode::Full | TrainMode::BaselineCeSupcon) {
                let pair_spec = PairSpec::from_labels(&labels);
                let (lp, grad_p, diag) = patch_level_loss_grad(
                    cache.embeddings.view(),
                    &labels,
                    &pair_spec,
                    loss_cfg,
                    T::from_f64_c(wp),
                )?;
                grad_v += &grad_p;
                loss_patch = lp.to_f64().unwrap();
                empty_pos += diag.empty_positive_anchors;
            }

            let (lc, mut grad_logits) = cross_entropy_with_grad(cache.logits.view(), &labels)?;
            grad_logits.mapv_inplace(|v| v * T::from_f64_c(wc));
            let loss_ce = lc.to_f64().unwrap();

            let (eff_ww, eff_wp) = match config.mode {
                TrainMode::Full => (ww, wp),
                TrainMode::BaselineCe => (0.0, 0.0),
                TrainMode::BaselineCeSupcon => (0.0, wp),
            };
            let total = eff_ww * loss_wsi + eff_wp * loss_patch + wc * loss_ce;

            if !total.is_finite() {
                let replay_path = out_dir.join("replay_batch.json");
                let replay = ReplayBatch {
                    step: step_counter,
                    epoch,
                    patch_ids: ids,
                    labels,
                    wsi_ids,
                };
                let json = serde_json::to_string_pretty(&replay)
                    .map_err(|e| Error::json(&replay_path, e))?;
                fs::write(&replay_path, json).map_err(|e| Error::io(&replay_path, e))?;
                return Err(Error::NonFiniteLoss {
                    step: step_counter,
                    replay_path,
                });
            }

            let grads = encoder.backward(&cache, grad_v.view(), grad_logits.view());
            encoder.sgd_step(&grads, lr);

            log.push(StepLog {
                step: step_counter,
                epoch,
                loss_wsi,
                loss_patch,
                loss_ce,
                total,
                empty_pos,
            });
        }

        let ckpt_path = ckpt_dir.join(format!("epoch_{epoch:03}.ckpt"));
        save_checkpoint(&encoder, &RngState::capture(&rng), &ckpt_path)?;
        if let Some(val_ds) = val {
            let m = evaluate_patches(&encoder, val_ds, images)?;
            val_history.push((epoch, m.macro_f1));
            if m.macro_f1 > best.1 {
                best = (epoch, m.macro_f1, ckpt_path);
            }
        } else {
            best = (epoch, f64::NEG_INFINITY, ckpt_path);
        }
    }

    let log_path = out_dir.join("metrics.csv");
    write_metrics_csv(&log, &log_path)?;
    if let Some(val_ds) = val {
        let _ = val_ds;
        let val_path = out_dir.join("val_metrics.csv");
        let mut s = String::from("epoch,macro_f1\n");
        for (e, m) in &val_history {
            s.push_str(&format!("{e},{m}\n"));
        }
        fs::write(&val_path, s).map_err(|e| Error::io(&val_path, e))?;
    }

    let best_ckpt = out_dir.join("best.ckpt");
    fs::copy(&best.2, &best_ckpt).map_err(|e| Error::io(&best_ckpt, e))?;
    let (selected, _) = crate::encoder::load_checkpoint::<T>(&best_ckpt)?;

    Ok(TrainOutcome {
        encoder: selected,
        best_epoch: best.0,
        best_val_macro_f1: val.map(|_| best.1),
        best_checkpoint: best_ckpt,
        log,
        val_history,
        log_path,
    })
}

fn preprocess_all<T: Scalar>(
    encoder: &Encoder<T>,
    train: &PatchDataset,
    val: Option<&PatchDataset>,
    images: &BTreeMap<String, Array3<u8>>,
) -> Result<BTreeMap<String, Array3<T>>> {
    use rayon::prelude::*;
    let mut ids: Vec<&String> = train.records.iter().map(|r| &r.patch_id).collect();
    if let Some(v) = val {
        ids.extend(v.records.iter().map(|r| &r.patch_id));
    }
    ids.sort();
    ids.dedup();
    let entries: Result<Vec<(String, Array3<T>)>> = ids
        .par_iter()
        .map(|id| {
            let img = images
                .get(*id)
                .ok_or_else(|| Error::invalid(format!("missing pixels for patch {id}")))?;
            Ok(((*id).clone(), encoder.preprocess(img)?))
        })
        .collect();
    Ok(entries?.into_iter().collect())
}

/// Uniform 128-patch batch: without replacement when the dataset suffices.
fn uniform_batch(train: &PatchDataset, rng: &mut impl Rng) -> (Vec<String>, Vec<Label>, Vec<String>) {
    let n = train.records.len();
    let indices: Vec<usize> = if n >= BATCH_SIZE {
        rand::seq::index::sample(rng, n, BATCH_SIZE).into_vec()
    } else {
        (0..BATCH_SIZE).map(|_| rng.gen_range(0..n)).collect()
    };
    let mut ids = Vec::with_capacity(BATCH_SIZE);
    let mut labels = Vec::with_capacity(BATCH_SIZE);
    let mut wsis = Vec::with_capacity(BATCH_SIZE);
    for i in indices {
        let r = &train.records[i];
        ids.push(r.patch_id.clone());
        labels.push(r.label);
        wsis.push(r.wsi_id.clone());
    }
    (ids, labels, wsis)
}

/// Exact column set consumed by downstream tooling.
fn write_metrics_csv(log: &[StepLog], path: &Path) -> Result<()> {
    let mut s = String::from("step,epoch,L_w,L_p,L_c,total,empty_pos\n");
    for row in log {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.step, row.epoch, row.loss_wsi, row.loss_patch, row.loss_ce, row.total, row.empty_pos
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub feasible: bool,
    pub val_macro_f1: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug)]
pub struct SweepOutcome<T: Scalar> {
    pub best_k: usize,
    pub best: TrainOutcome<T>,
    pub rows: Vec<SweepRow>,
}

/// Sweep the pseudo-domain count: re-cluster (the BoVW vectors are cached
/// by the caller), retrain in full mode, and pick the K with the highest
/// validation macro-F1, ties broken toward the smaller K.
#[allow(clippy::too_many_arguments)]
pub fn sweep_k<T: Scalar>(
    ks: &[usize],
    vectors: &[BovwVector<T>],
    cluster_seed: u64,
    encoder_config: &EncoderConfig,
    encoder_seed: u64,
    train_ds: &PatchDataset,
    val_ds: &PatchDataset,
    images: &BTreeMap<String, Array3<u8>>,
    config: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: &Path,
) -> Result<SweepOutcome<T>> {
    if ks.is_empty() {
        return Err(Error::invalid("no K values to sweep"));
    }
    let mut rows = Vec::new();
    let mut best: Option<(usize, TrainOutcome<T>)> = None;
    for &k in ks {
        if k == 0 || vectors.len() < k {
            rows.push(SweepRow {
                k,
                feasible: false,
                val_macro_f1: None,
                note: Some(format!("needs at least {k} WSIs, have {}", vectors.len())),
            });
            continue;
        }
        let assignment = cluster_wsis(vectors, k, cluster_seed)?;
        let run_dir = out_dir.join(format!("k{k}"));
        let mut run_config = config.clone();
        run_config.mode = TrainMode::Full;
        let outcome = train(
            TrainerInputs {
                encoder: Encoder::<T>::new(encoder_config, encoder_seed)?,
                train: train_ds,
                val: Some(val_ds),
                images,
                assignment: Some(&assignment),
            },
            &run_config,
            loss_cfg,
            &run_dir,
        )?;
        let score = outcome.best_val_macro_f1.unwrap_or(f64::NEG_INFINITY);
        rows.push(SweepRow {
            k,
            feasible: true,
            val_macro_f1: Some(score),
            note: None,
        });
        let better = match &best {
            None => true,
            Some((best_k, b)) => {
                let best_score = b.best_val_macro_f1.unwrap_or(f64::NEG_INFINITY);
                score > best_score || (score == best_score && k < *best_k)
            }
        };
        if better {
            best = Some((k, outcome));
        }
    }
    let (best_k, best) = best.ok_or_else(|| {
        Error::invalid(format!(
            "no feasible K in {ks:?} for {} groupable WSIs",
            vectors.len()
        ))
    })?;
    Ok(SweepOutcome { best_k, best, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BackboneDepth;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_config(d: usize) -> EncoderConfig {
        EncoderConfig {
            backbone_depth: BackboneDepth::Tiny,
            embed_dim: d,
            proj_hidden: d,
            pretrained_init: false,
        }
    }

    /// Two WSIs x two classes x `per_group` patches with random pixels.
    fn synthetic_patches(
        per_group: usize,
        seed: u64,
    ) -> (PatchDataset, BTreeMap<String, Array3<u8>>) {
        let mut rng = rng_from(seed);
        let mut records = Vec::new();
        let mut images = BTreeMap::new();
        for wsi in ["wa", "wb"] {
            for label in 0..2u8 {
                for i in 0..per_group {
                    let id = format!("{wsi}:l{label}:{i}");
                    let mut img = Array3::<u8>::zeros((256, 256, 3));
                    for v in img.iter_mut() {
                        *v = rng.gen();
                    }
                    images.insert(id.clone(), img);
                    records.push(crate::patch::PatchRecord {
                        patch_id: id,
                        wsi_id: wsi.to_string(),
                        row: i,
                        col: label as usize,
                        label,
                        image_path: String::new(),
                    });
                }
            }
        }
        (PatchDataset::from_records(records), images)
    }

    fn two_cluster_assignment() -> PseudoDomainAssignment {
        PseudoDomainAssignment {
            assignments: [("wa".to_string(), 0), ("wb".to_string(), 1)]
                .into_iter()
                .collect(),
            k: 2,
            k1: 4,
            codebook_seed: 0,
            cluster_seed: 0,
        }
    }

    /// The training step's objective and parameter gradient, extracted for
    /// finite-difference verification.
    fn objective_and_grads(
        encoder: &Encoder<f64>,
        prepped: &[&Array3<f64>],
        labels: &[Label],
        wsi_ids: &[String],
        loss_cfg: &LossConfig,
    ) -> (f64, Vec<f64>) {
        let cache = encoder.forward_train(prepped);
        let mut grad_v = Array2::<f64>::zeros(cache.embeddings.dim());
        let protos = class_prototypes(cache.embeddings.view(), labels, wsi_ids).unwrap();
        let (lw, _) =
            wsi_level_loss_grad(&protos, cache.embeddings.view(), loss_cfg, 1.0, &mut grad_v)
                .unwrap();
        let pair_spec = PairSpec::from_labels(labels);
        let (lp, grad_p, _) =
            patch_level_loss_grad(cache.embeddings.view(), labels, &pair_spec, loss_cfg, 1.0)
                .unwrap();
        grad_v += &grad_p;
        let (lc, grad_logits) = cross_entropy_with_grad(cache.logits.view(), labels).unwrap();
        let grads = encoder.backward(&cache, grad_v.view(), grad_logits.view());
        (lw + lp + lc, grads)
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let encoder = Encoder::<f64>::new(&tiny_config(8), 3).unwrap();
        let (_, images) = synthetic_patches(2, 17);
        let mut labels = Vec::new();
        let mut wsi_ids = Vec::new();
        let mut prepped = Vec::new();
        for (id, img) in &images {
            prepped.push(encoder.preprocess(img).unwrap());
            labels.push(if id.contains(":l1:") { 1 } else { 0 });
            wsi_ids.push(id.split(':').next().unwrap().to_string());
        }
        let refs: Vec<&Array3<f64>> = prepped.iter().collect();
        let loss_cfg = LossConfig::default();

        let (_, grads) = objective_and_grads(&encoder, &refs, &labels, &wsi_ids, &loss_cfg);

        let value_of = |enc: &Encoder<f64>| {
            objective_and_grads(enc, &refs, &labels, &wsi_ids, &loss_cfg).0
        };

        let n = encoder.param_count();
        let eps = 1e-5;
        for idx in [0, n / 5, n / 2, n - 3] {
            let mut plus = encoder.clone();
            plus.params_mut()[idx] += eps;
            let mut minus = encoder.clone();
            minus.params_mut()[idx] -= eps;
            let fd = (value_of(&plus) - value_of(&minus)) / (2.0 * eps);
            let analytic = grads[idx];
            let tol = 1e-3 * fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() <= tol,
                "param {idx}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn baseline_ce_logs_zero_contrastive_terms_without_assignment() {
        let (ds, images) = synthetic_patches(3, 5);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            learning_rate: 0.01,
            epochs: 1,
            steps_per_epoch: Some(2),
            seed: 9,
            mode: TrainMode::BaselineCe,
            pair_mode: PairMode::CrossCluster,
        };
        let outcome = train(
            TrainerInputs {
                encoder: Encoder::<f32>::new(&tiny_config(8), 0).unwrap(),
                train: &ds,
                val: None,
                images: &images,
                assignment: None,
            },
            &config,
            &LossConfig::default(),
            dir.path(),
        )
        .unwrap();
        assert_eq!(outcome.log.len(), 2);
        for row in &outcome.log {
            assert_eq!(row.loss_wsi, 0.0);
            assert_eq!(row.loss_patch, 0.0);
            assert!(row.loss_ce > 0.0);
        }
        let csv = fs::read_to_string(&outcome.log_path).unwrap();
        assert!(csv.starts_with("step,epoch,L_w,L_p,L_c,total,empty_pos\n"));
    }

    #[test]
    fn full_mode_requires_assignment() {
        let (ds, images) = synthetic_patches(2, 6);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 1,
            steps_per_epoch: Some(1),
            mode: TrainMode::Full,
            ..Default::default()
        };
        let err = train(
            TrainerInputs {
                encoder: Encoder::<f32>::new(&tiny_config(8), 0).unwrap(),
                train: &ds,
                val: None,
                images: &images,
                assignment: None,
            },
            &config,
            &LossConfig::default(),
            dir.path(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn identical_config_and_seed_reproduce_identical_logs() {
        let (ds, images) = synthetic_patches(3, 8);
        let assignment = two_cluster_assignment();
        let config = TrainConfig {
            learning_rate: 0.02,
            epochs: 2,
            steps_per_epoch: Some(2),
            seed: 4,
            mode: TrainMode::Full,
            pair_mode: PairMode::CrossCluster,
        };
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let outcome = train(
                TrainerInputs {
                    encoder: Encoder::<f32>::new(&tiny_config(8), 1).unwrap(),
                    train: &ds,
                    val: None,
                    images: &images,
                    assignment: Some(&assignment),
                },
                &config,
                &LossConfig::default(),
                dir.path(),
            )
            .unwrap();
            fs::read_to_string(&outcome.log_path).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_mode_batches_are_cross_cluster_pairs() {
        let (ds, images) = synthetic_patches(3, 12);
        let assignment = two_cluster_assignment();
        let config = TrainConfig {
            learning_rate: 0.01,
            epochs: 1,
            steps_per_epoch: Some(3),
            seed: 2,
            mode: TrainMode::Full,
            pair_mode: PairMode::CrossCluster,
        };
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(
            TrainerInputs {
                encoder: Encoder::<f32>::new(&tiny_config(8), 1).unwrap(),
                train: &ds,
                val: None,
                images: &images,
                assignment: Some(&assignment),
            },
            &config,
            &LossConfig::default(),
            dir.path(),
        )
        .unwrap();
        // Both contrastive terms active and finite.
        for row in &outcome.log {
            assert!(row.loss_patch.is_finite());
            assert!(row.loss_wsi.is_finite());
            assert!(row.total.is_finite());
        }
        assert_eq!(outcome.log.len(), 3);
    }
}
