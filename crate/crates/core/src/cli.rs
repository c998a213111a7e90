//! The `wsidg` command line: generate | tile | group | train | eval |
//! ablate | sweep-k. Every subcommand writes a resolved-config snapshot
//! beside its outputs; re-running a snapshot reproduces them.

use crate::bovw::{
    bovw_vector, cluster_wsis, fit_codebook, load_assignment_json, save_assignment_json,
    save_bovw_csv, save_codebook_csv, BovwVector, PseudoDomainAssignment,
};
use crate::config::ExperimentConfig;
use crate::encoder::{ensure_dir, load_checkpoint, Encoder, StyleExtractor};
use crate::error::{Error, Result};
use crate::eval::{comparison_csv, evaluate_wsis, MetricsReport, REPORT_MODES};
use crate::patch::{build_dataset, load_patches, write_patches, PatchDataset, PATCH_SIZE};
use crate::plot::render_comparison_plot;
use crate::synth::{generate_cohort, load_cohort, write_cohort, CohortManifest, Split, WsiRecord};
use crate::trainer::{train, sweep_k, TrainMode, TrainerInputs};
use crate::{img, PipelineScalar};
use clap::{Parser, Subcommand};
use ndarray::{Array2, Array3};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "wsidg", version, about = "Pseudo-domain contrastive learning for WSI patch segmentation")]
struct Cli {
    /// Experiment config JSON (desk-scale defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training mode: full | baseline_ce | baseline_ce_supcon.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort (images, masks, manifest).
    Generate,
    /// Tile the cohort into single-class patches and write the manifest.
    Tile,
    /// Fit the visual-word codebook, BoVW vectors, and pseudo-domains.
    Group,
    /// Train with the configured mode.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run baseline_ce, baseline_ce_supcon, and full on the shared cohort
    /// and emit the comparison table and plot.
    Ablate,
    /// Sweep the pseudo-domain count and report validation metrics per K.
    SweepK,
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "full" => Ok(TrainMode::Full),
        "baseline_ce" => Ok(TrainMode::BaselineCe),
        "baseline_ce_supcon" => Ok(TrainMode::BaselineCeSupcon),
        other => Err(Error::invalid(format!(
            "unknown mode {other:?}; expected full, baseline_ce, or baseline_ce_supcon"
        ))),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = &cli.mode {
        cfg.train.mode = parse_mode(mode)?;
    }
    cfg.validate()?;

    match cli.command {
        Command::Generate => {
            let dir = cmd_generate(&cfg)?;
            println!("cohort written to {}", dir.display());
        }
        Command::Tile => {
            let summary = cmd_tile(&cfg)?;
            println!("{summary}");
        }
        Command::Group => {
            let g = cmd_group(&cfg)?;
            println!(
                "grouped {} WSIs into K={} pseudo-domains (K1={}){}",
                g.assignment.assignments.len(),
                g.assignment.k,
                g.assignment.k1,
                match g.profile_ari {
                    Some(ari) => format!("; ARI vs hidden profiles = {ari:.4}"),
                    None => String::new(),
                }
            );
            for note in &g.notes {
                println!("note: {note}");
            }
        }
        Command::Train => {
            let arts = cmd_train(&cfg, cfg.train.mode)?;
            println!(
                "trained mode {} -> best epoch {}{} ({})",
                cfg.train.mode,
                arts.best_epoch,
                match arts.best_val_macro_f1 {
                    Some(v) => format!(" val macro-F1 {v:.4}"),
                    None => String::new(),
                },
                arts.best_checkpoint.display()
            );
        }
        Command::Eval { checkpoint, split } => {
            let split = parse_split(&split)?;
            let (report, dir) = cmd_eval(&cfg, &checkpoint, split)?;
            println!(
                "split {split}: precision {:.4} recall {:.4} F1 {:.4} macro-F1 {:.4} (report in {})",
                report.precision,
                report.recall,
                report.f1,
                report.macro_f1,
                dir.display()
            );
        }
        Command::Ablate => {
            let outcome = run_ablation(&cfg)?;
            println!("comparison written to {}", outcome.comparison_csv_path.display());
            for mode in REPORT_MODES {
                if let Some(r) = outcome.reports.get(mode) {
                    println!(
                        "{mode}: precision {:.4} recall {:.4} F1 {:.4} macro-F1 {:.4}",
                        r.precision, r.recall, r.f1, r.macro_f1
                    );
                }
            }
        }
        Command::SweepK => {
            let outcome = cmd_sweep_k(&cfg)?;
            println!("best K = {}", outcome.best_k);
            for row in &outcome.rows {
                match (&row.val_macro_f1, &row.note) {
                    (Some(v), _) => println!("K={}: val macro-F1 {v:.4}", row.k),
                    (None, Some(n)) => println!("K={}: skipped ({n})", row.k),
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

fn cohort_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("cohort")
}

fn patches_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("patches")
}

fn grouping_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("grouping")
}

/// Generate the cohort and write it plus the manifest.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cohort_dir(cfg);
    if !dir.exists() {
        println!("creating output directory {}", dir.display());
    }
    ensure_dir(&dir)?;
    let cohort = generate_cohort(&cfg.cohort, cfg.cohort_seed())?;
    for w in &cohort.wsis {
        if let Some(warning) = &w.fraction_warning {
            println!("warning [{}]: {warning}", w.record.wsi_id);
        }
    }
    write_cohort(&cohort, &dir)?;
    cfg.write_snapshot("generate")?;
    Ok(dir)
}

fn load_cohort_checked(cfg: &ExperimentConfig) -> Result<(Vec<WsiRecord>, CohortManifest)> {
    let dir = cohort_dir(cfg);
    if !dir.join("manifest.json").exists() {
        return Err(Error::invalid(format!(
            "cohort manifest not found at {}; run `wsidg generate` first",
            dir.join("manifest.json").display()
        )));
    }
    load_cohort(&dir)
}

/// Tile every cohort WSI and persist the patch manifest plus counts.
pub fn cmd_tile(cfg: &ExperimentConfig) -> Result<String> {
    let (wsis, _) = load_cohort_checked(cfg)?;
    let built = build_dataset(&wsis, None, PATCH_SIZE, PATCH_SIZE)?;
    let dir = patches_dir(cfg);
    ensure_dir(&dir)?;
    write_patches(&built, &dir)?;
    cfg.write_snapshot("tile")?;

    let mut lines = vec![format!("{} patches total", built.summary.total_patches)];
    for (split, counts) in &built.summary.per_split {
        lines.push(format!(
            "{split}: non_tumor={} tumor={}",
            counts.non_tumor, counts.tumor
        ));
    }
    if !built.summary.empty_wsis.is_empty() {
        lines.push(format!(
            "WSIs without single-class tiles: {}",
            built.summary.empty_wsis.join(", ")
        ));
    }
    Ok(lines.join("\n"))
}

fn load_patches_checked(
    cfg: &ExperimentConfig,
) -> Result<(PatchDataset, BTreeMap<String, Array3<u8>>)> {
    let dir = patches_dir(cfg);
    if !dir.join("patch_manifest.json").exists() {
        return Err(Error::invalid(format!(
            "patch manifest not found at {}; run `wsidg tile` first",
            dir.join("patch_manifest.json").display()
        )));
    }
    load_patches(&dir)
}

fn split_map(manifest: &CohortManifest) -> BTreeMap<String, Split> {
    manifest
        .entries
        .iter()
        .map(|e| (e.wsi_id.clone(), e.split))
        .collect()
}

/// Restrict a dataset to the WSIs of one split, keeping (empty) index
/// entries for split members without patches.
pub fn dataset_for_split(
    full: &PatchDataset,
    splits: &BTreeMap<String, Split>,
    split: Split,
) -> PatchDataset {
    let records: Vec<_> = full
        .records
        .iter()
        .filter(|r| splits.get(&r.wsi_id) == Some(&split))
        .cloned()
        .collect();
    let mut ds = PatchDataset::from_records(records);
    for (wsi, &s) in splits {
        if s == split {
            ds.index.entry(wsi.clone()).or_default();
        }
    }
    ds
}

pub struct GroupArtifacts {
    pub assignment: PseudoDomainAssignment,
    pub vectors: Vec<BovwVector<PipelineScalar>>,
    /// Adjusted Rand index of the pseudo-domains against the hidden profile
    /// indices of the clustered WSIs, when the manifest carries them.
    pub profile_ari: Option<f64>,
    pub notes: Vec<String>,
}

/// The grouping core, independent of disk layout: codebook over non-tumor
/// style features, per-WSI BoVW histograms, K-means pseudo-domains.
/// WSIs with zero non-tumor patches are excluded from clustering with a
/// note rather than silently dropped.
pub fn group_from_patches(
    train_ds: &PatchDataset,
    images: &BTreeMap<String, Array3<u8>>,
    style: &StyleExtractor<PipelineScalar>,
    k1: usize,
    k: usize,
    codebook_seed: u64,
    cluster_seed: u64,
) -> Result<(
    crate::bovw::Codebook<PipelineScalar>,
    Vec<BovwVector<PipelineScalar>>,
    PseudoDomainAssignment,
    Vec<String>,
)> {
    // Stage 1: codebook on all non-tumor training patches. Tumor patches
    // never enter the feature matrix, which fit_codebook also enforces.
    let mut features: Vec<ndarray::Array1<PipelineScalar>> = Vec::new();
    let mut feature_wsis: Vec<String> = Vec::new();
    for (wsi_id, lists) in &train_ds.index {
        for patch_id in &lists[0] {
            features.push(style.features(&images[patch_id])?);
            feature_wsis.push(wsi_id.clone());
        }
    }
    if features.is_empty() {
        return Err(Error::invalid("no non-tumor training patches to group on"));
    }
    let dim = features[0].len();
    let mut matrix = Array2::<PipelineScalar>::zeros((features.len(), dim));
    for (i, f) in features.iter().enumerate() {
        matrix.row_mut(i).assign(f);
    }
    let labels = vec![0u8; features.len()];
    let codebook = fit_codebook(matrix.view(), &labels, k1, codebook_seed)?;

    // Stage 2: per-WSI histograms.
    let mut notes = Vec::new();
    let mut vectors = Vec::new();
    for wsi_id in train_ds.index.keys() {
        let rows: Vec<usize> = feature_wsis
            .iter()
            .enumerate()
            .filter(|(_, w)| *w == wsi_id)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            notes.push(format!(
                "{wsi_id}: no non-tumor patches; excluded from pseudo-domain clustering"
            ));
            continue;
        }
        let mut sub = Array2::<PipelineScalar>::zeros((rows.len(), dim));
        for (j, &i) in rows.iter().enumerate() {
            sub.row_mut(j).assign(&matrix.row(i));
        }
        vectors.push(bovw_vector(wsi_id, sub.view(), &codebook)?);
    }

    if vectors.len() < k {
        return Err(Error::invalid(format!(
            "K = {k} exceeds the {} groupable training WSIs",
            vectors.len()
        )));
    }
    let mut assignment = cluster_wsis(&vectors, k, cluster_seed)?;
    assignment.codebook_seed = codebook_seed;
    Ok((codebook, vectors, assignment, notes))
}

/// Codebook over non-tumor style features of training WSIs, per-WSI BoVW
/// vectors, and the K-means pseudo-domain assignment. All three artifacts
/// are persisted with their seeds.
pub fn cmd_group(cfg: &ExperimentConfig) -> Result<GroupArtifacts> {
    let (_, manifest) = load_cohort_checked(cfg)?;
    let (dataset, images) = load_patches_checked(cfg)?;
    let splits = split_map(&manifest);
    let train_ds = dataset_for_split(&dataset, &splits, Split::Train);

    let encoder = Encoder::<PipelineScalar>::new(&cfg.encoder, cfg.encoder_seed())?;
    let style = StyleExtractor::from_encoder(&encoder, cfg.grouping.style_mode);
    let (codebook, vectors, assignment, notes) = group_from_patches(
        &train_ds,
        &images,
        &style,
        cfg.grouping.k1,
        cfg.grouping.k,
        cfg.codebook_seed(),
        cfg.cluster_seed(),
    )?;

    let dir = grouping_dir(cfg);
    ensure_dir(&dir)?;
    save_codebook_csv(&codebook, &dir.join("codebook.csv"))?;
    save_bovw_csv(&vectors, &dir.join("bovw.csv"))?;
    save_assignment_json(&assignment, &dir.join("assignment.json"))?;
    cfg.write_snapshot("group")?;

    // Diagnostic: recovery of the hidden profile partition.
    let profile_of: BTreeMap<&str, usize> = manifest
        .entries
        .iter()
        .map(|e| (e.wsi_id.as_str(), e.profile_index))
        .collect();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (wsi, &cluster) in &assignment.assignments {
        if let Some(&p) = profile_of.get(wsi.as_str()) {
            truth.push(p);
            pred.push(cluster);
        }
    }
    let profile_ari = (!truth.is_empty()).then(|| crate::eval::adjusted_rand_index(&truth, &pred));

    Ok(GroupArtifacts {
        assignment,
        vectors,
        profile_ari,
        notes,
    })
}

pub struct TrainArtifacts {
    pub best_epoch: usize,
    pub best_val_macro_f1: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub out_dir: PathBuf,
}

/// Train one mode on the prepared cohort/patches (and grouping, for full).
pub fn cmd_train(cfg: &ExperimentConfig, mode: TrainMode) -> Result<TrainArtifacts> {
    let (_, manifest) = load_cohort_checked(cfg)?;
    let (dataset, images) = load_patches_checked(cfg)?;
    let splits = split_map(&manifest);
    let train_ds = dataset_for_split(&dataset, &splits, Split::Train);
    let val_ds = dataset_for_split(&dataset, &splits, Split::Val);

    let assignment = if mode == TrainMode::Full {
        let path = grouping_dir(cfg).join("assignment.json");
        if !path.exists() {
            return Err(Error::invalid(format!(
                "pseudo-domain assignment not found at {}; run `wsidg group` first",
                path.display()
            )));
        }
        Some(load_assignment_json(&path)?)
    } else {
        None
    };

    let out_dir = cfg.out_dir.join("train").join(mode.to_string());
    ensure_dir(&out_dir)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.mode = mode;
    train_cfg.seed = cfg.train_seed();

    let outcome = train(
        TrainerInputs {
            encoder: Encoder::<PipelineScalar>::new(&cfg.encoder, cfg.encoder_seed())?,
            train: &train_ds,
            val: (!val_ds.records.is_empty()).then_some(&val_ds),
            images: &images,
            assignment: assignment.as_ref(),
        },
        &train_cfg,
        &cfg.loss,
        &out_dir,
    )?;
    cfg.write_snapshot(&format!("train_{mode}"))?;

    Ok(TrainArtifacts {
        best_epoch: outcome.best_epoch,
        best_val_macro_f1: outcome.best_val_macro_f1,
        best_checkpoint: outcome.best_checkpoint,
        log_path: outcome.log_path,
        out_dir,
    })
}

/// Evaluate a checkpoint on one split: report JSON plus predicted masks.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: Split,
) -> Result<(MetricsReport, PathBuf)> {
    let (wsis, _) = load_cohort_checked(cfg)?;
    let (encoder, _) = load_checkpoint::<PipelineScalar>(checkpoint)?;
    if encoder.config() != &cfg.encoder {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint {} was trained with a different encoder configuration",
            checkpoint.display()
        )));
    }
    let selected: Vec<WsiRecord> = wsis.into_iter().filter(|w| w.split == split).collect();
    if selected.is_empty() {
        return Err(Error::invalid(format!("split {split} is empty")));
    }
    let evaluation = evaluate_wsis(&encoder, &selected, PATCH_SIZE)?;

    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "checkpoint".to_string());
    let dir = cfg.out_dir.join("eval").join(format!("{split}_{stem}"));
    let mask_dir = dir.join("masks");
    ensure_dir(&mask_dir)?;
    for (wsi_id, mask) in &evaluation.masks {
        img::save_mask_png(&mask_dir.join(format!("{wsi_id}.png")), mask)?;
    }
    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&evaluation.report)
        .map_err(|e| Error::json(&report_path, e))?;
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    cfg.write_snapshot("eval")?;
    Ok((evaluation.report, dir))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize)]
pub struct AblationOutcome {
    pub reports: BTreeMap<String, MetricsReport>,
    pub comparison_csv_path: PathBuf,
    pub plot_path: PathBuf,
    /// Hash of the patch manifest each mode consumed; asserted identical.
    pub patch_manifest_sha256: String,
}

/// The full comparison: generate, tile, group, then train + evaluate the
/// three modes on the shared cohort with the shared seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    cmd_generate(cfg)?;
    cmd_tile(cfg)?;
    cmd_group(cfg)?;

    let manifest_path = patches_dir(cfg).join("patch_manifest.json");
    let mut mode_hashes: BTreeMap<String, String> = BTreeMap::new();
    let mut reports = BTreeMap::new();
    for mode in [TrainMode::BaselineCe, TrainMode::BaselineCeSupcon, TrainMode::Full] {
        // Hash of the manifest as consumed by this run.
        mode_hashes.insert(mode.to_string(), sha256_file(&manifest_path)?);
        let arts = cmd_train(cfg, mode)?;
        let (report, _) = cmd_eval(cfg, &arts.best_checkpoint, Split::Test)?;
        reports.insert(mode.to_string(), report);
    }

    let first_hash = mode_hashes.values().next().unwrap().clone();
    if !mode_hashes.values().all(|h| h == &first_hash) {
        return Err(Error::invalid(
            "patch manifest changed between ablation runs",
        ));
    }
    println!("patch manifest sha256 = {first_hash} (identical across all 3 runs)");

    let dir = cfg.out_dir.join("ablation");
    ensure_dir(&dir)?;
    let comparison_csv_path = dir.join("comparison.csv");
    fs::write(&comparison_csv_path, comparison_csv(&reports))
        .map_err(|e| Error::io(&comparison_csv_path, e))?;
    let plot_path = dir.join("comparison.png");
    render_comparison_plot(&reports, &plot_path)?;

    let summary_path = dir.join("summary.json");
    #[derive(Serialize)]
    struct Summary<'a> {
        patch_manifest_sha256: &'a str,
        per_mode_manifest_sha256: &'a BTreeMap<String, String>,
        reports: &'a BTreeMap<String, MetricsReport>,
    }
    let summary = Summary {
        patch_manifest_sha256: &first_hash,
        per_mode_manifest_sha256: &mode_hashes,
        reports: &reports,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&summary_path, e))?;
    fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))?;
    cfg.write_snapshot("ablate")?;

    Ok(AblationOutcome {
        reports,
        comparison_csv_path,
        plot_path,
        patch_manifest_sha256: first_hash,
    })
}

pub struct SweepArtifacts {
    pub best_k: usize,
    pub rows: Vec<crate::trainer::SweepRow>,
    pub csv_path: PathBuf,
}

/// Sweep K over `cfg.sweep_ks`, choosing by validation macro-F1 with ties
/// toward the smaller K. Reuses the cached BoVW vectors (cohort, patches,
/// and grouping features are computed once).
pub fn cmd_sweep_k(cfg: &ExperimentConfig) -> Result<SweepArtifacts> {
    cmd_generate(cfg)?;
    cmd_tile(cfg)?;
    let group = cmd_group(cfg)?;

    let (_, manifest) = load_cohort_checked(cfg)?;
    let (dataset, images) = load_patches_checked(cfg)?;
    let splits = split_map(&manifest);
    let train_ds = dataset_for_split(&dataset, &splits, Split::Train);
    let val_ds = dataset_for_split(&dataset, &splits, Split::Val);
    if val_ds.records.is_empty() {
        return Err(Error::invalid("sweep-k needs a nonempty validation split"));
    }

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.train_seed();
    let out_dir = cfg.out_dir.join("sweep");
    let outcome = sweep_k(
        &cfg.sweep_ks,
        &group.vectors,
        cfg.cluster_seed(),
        &cfg.encoder,
        cfg.encoder_seed(),
        &train_ds,
        &val_ds,
        &images,
        &train_cfg,
        &cfg.loss,
        &out_dir,
    )?;

    let csv_path = out_dir.join("sweep.csv");
    let mut s = String::from("k,feasible,val_macro_f1,note\n");
    for row in &outcome.rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.k,
            row.feasible,
            row.val_macro_f1.map(|v| format!("{v:.6}")).unwrap_or_default(),
            row.note.clone().unwrap_or_default()
        ));
    }
    fs::write(&csv_path, s).map_err(|e| Error::io(&csv_path, e))?;
    cfg.write_snapshot("sweep_k")?;

    Ok(SweepArtifacts {
        best_k: outcome.best_k,
        rows: outcome.rows,
        csv_path,
    })
}
