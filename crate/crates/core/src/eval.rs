//! Patch-level inference, WSI mask reconstruction, and the metric suite
//! (precision / recall / F1 / macro-F1, tumor = positive class).

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::patch::{Label, PatchDataset};
use crate::scalar::Scalar;
use crate::synth::WsiRecord;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Confusion counts with tumor (label 1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Exact counting over equal-length {0,1} label sequences.
pub fn confusion(predicted: &[Label], truth: &[Label]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction length {} != truth length {}",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Metric suite. Zero-denominator metrics are 0 with the metric named in
/// `zero_division_flags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_tumor: f64,
    pub f1_non_tumor: f64,
    pub macro_f1: f64,
    pub counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_division_flags: Vec<String>,
    /// Pixel agreement of the reconstructed mask (all tiles, block
    /// replication) with the ground truth; filled by WSI-level evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_accuracy: Option<f64>,
}

fn safe_div(num: f64, den: f64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        flags.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

pub fn metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::invalid("metrics of an empty confusion table"));
    }
    let mut flags = Vec::new();
    let (tp, fp, fn_, tn) = (
        counts.tp as f64,
        counts.fp as f64,
        counts.fn_ as f64,
        counts.tn as f64,
    );
    let precision = safe_div(tp, tp + fp, "precision", &mut flags);
    let recall = safe_div(tp, tp + fn_, "recall", &mut flags);
    let f1_tumor = safe_div(2.0 * precision * recall, precision + recall, "f1_tumor", &mut flags);

    // Non-tumor F1 is the same computation with the positive class swapped.
    let precision_nt = safe_div(tn, tn + fn_, "precision_non_tumor", &mut flags);
    let recall_nt = safe_div(tn, tn + fp, "recall_non_tumor", &mut flags);
    let f1_non_tumor = safe_div(
        2.0 * precision_nt * recall_nt,
        precision_nt + recall_nt,
        "f1_non_tumor",
        &mut flags,
    );

    Ok(MetricsReport {
        precision,
        recall,
        f1: f1_tumor,
        f1_tumor,
        f1_non_tumor,
        macro_f1: 0.5 * (f1_tumor + f1_non_tumor),
        counts: *counts,
        zero_division_flags: flags,
        pixel_accuracy: None,
    })
}

/// Tile-grid prediction for one WSI: every grid tile (mixed-mask tiles
/// included) gets the argmax class; the pixel mask is the grid upsampled by
/// block replication.
pub struct MaskPrediction {
    /// (rows, cols) tile-grid labels.
    pub grid: Array2<u8>,
    /// (H', W') pixel labels, H' = rows * patch_size.
    pub pixel_mask: Array2<u8>,
}

pub fn predict_mask<T: Scalar>(
    encoder: &Encoder<T>,
    wsi: &WsiRecord,
    patch_size: usize,
) -> Result<MaskPrediction> {
    let (h, w) = wsi.mask.dim();
    if patch_size > h.min(w) {
        return Err(Error::invalid("WSI smaller than one tile"));
    }
    let rows = h / patch_size;
    let cols = w / patch_size;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            tiles.push(
                wsi.image
                    .slice(ndarray::s![
                        r * patch_size..(r + 1) * patch_size,
                        c * patch_size..(c + 1) * patch_size,
                        ..
                    ])
                    .to_owned(),
            );
        }
    }
    let refs: Vec<&Array3<u8>> = tiles.iter().collect();
    let embeddings = encoder.embed(&refs)?;
    let logits = encoder.classify(embeddings.view())?;

    let mut grid = Array2::<u8>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let row = logits.row(r * cols + c);
            grid[[r, c]] = if row[1] > row[0] { 1 } else { 0 };
        }
    }
    let mut pixel_mask = Array2::<u8>::zeros((rows * patch_size, cols * patch_size));
    for r in 0..rows {
        for c in 0..cols {
            pixel_mask
                .slice_mut(ndarray::s![
                    r * patch_size..(r + 1) * patch_size,
                    c * patch_size..(c + 1) * patch_size
                ])
                .fill(grid[[r, c]]);
        }
    }
    Ok(MaskPrediction { grid, pixel_mask })
}

/// Patch-classification metrics over a dataset (single-class tiles only,
/// mirroring the training patch rule).
pub fn evaluate_patches<T: Scalar>(
    encoder: &Encoder<T>,
    dataset: &PatchDataset,
    images: &BTreeMap<String, Array3<u8>>,
) -> Result<MetricsReport> {
    if dataset.records.is_empty() {
        return Err(Error::invalid("no patches to evaluate"));
    }
    let mut preds = Vec::with_capacity(dataset.records.len());
    let mut truths = Vec::with_capacity(dataset.records.len());
    // Bound memory by batching inference.
    for chunk in dataset.records.chunks(256) {
        let refs: Vec<&Array3<u8>> = chunk
            .iter()
            .map(|r| {
                images.get(&r.patch_id).ok_or_else(|| {
                    Error::invalid(format!("missing pixels for patch {}", r.patch_id))
                })
            })
            .collect::<Result<_>>()?;
        let embeddings = encoder.embed(&refs)?;
        let logits = encoder.classify(embeddings.view())?;
        for (i, r) in chunk.iter().enumerate() {
            preds.push(if logits[[i, 1]] > logits[[i, 0]] { 1 } else { 0 });
            truths.push(r.label);
        }
    }
    metrics(&confusion(&preds, &truths)?)
}

/// Patch metrics plus reconstructed masks and whole-image pixel agreement
/// for every WSI of one split.
pub struct SplitEvaluation {
    pub report: MetricsReport,
    /// wsi_id -> predicted pixel mask.
    pub masks: BTreeMap<String, Array2<u8>>,
}

pub fn evaluate_wsis<T: Scalar>(
    encoder: &Encoder<T>,
    wsis: &[WsiRecord],
    patch_size: usize,
) -> Result<SplitEvaluation> {
    if wsis.is_empty() {
        return Err(Error::invalid("no WSIs to evaluate"));
    }
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut masks = BTreeMap::new();
    let mut agree: u64 = 0;
    let mut total: u64 = 0;
    for wsi in wsis {
        let prediction = predict_mask(encoder, wsi, patch_size)?;
        let (rows, cols) = prediction.grid.dim();
        for r in 0..rows {
            for c in 0..cols {
                let window = wsi.mask.slice(ndarray::s![
                    r * patch_size..(r + 1) * patch_size,
                    c * patch_size..(c + 1) * patch_size
                ]);
                let first = window[[0, 0]];
                if window.iter().all(|&v| v == first) {
                    preds.push(prediction.grid[[r, c]]);
                    truths.push(first);
                }
            }
        }
        let (ph, pw) = prediction.pixel_mask.dim();
        for y in 0..ph {
            for x in 0..pw {
                total += 1;
                if prediction.pixel_mask[[y, x]] == wsi.mask[[y, x]] {
                    agree += 1;
                }
            }
        }
        masks.insert(wsi.wsi_id.clone(), prediction.pixel_mask);
    }
    if preds.is_empty() {
        return Err(Error::invalid(
            "split has no single-class tiles to score patch metrics on",
        ));
    }
    let mut report = metrics(&confusion(&preds, &truths)?)?;
    report.pixel_accuracy = Some(agree as f64 / total as f64);
    Ok(SplitEvaluation { report, masks })
}

/// Adjusted Rand index between two partitions of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same items");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };

    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let sum_joint: f64 = joint.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sum_rows * sum_cols / choose2(n as u64);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_joint - expected) / (max_index - expected)
}

/// Fixed row order of the comparison table.
pub const REPORT_MODES: [&str; 3] = ["baseline_ce", "baseline_ce_supcon", "full"];

/// Mode-keyed comparison table, rows in [`REPORT_MODES`] order regardless of
/// input order; cells formatted to 4 decimals.
pub fn comparison_csv(runs: &BTreeMap<String, MetricsReport>) -> String {
    let mut out = String::from("mode,precision,recall,f1,macro_f1\n");
    for mode in REPORT_MODES {
        if let Some(r) = runs.get(mode) {
            out.push_str(&format!(
                "{mode},{:.4},{:.4},{:.4},{:.4}\n",
                r.precision, r.recall, r.f1, r.macro_f1
            ));
        }
    }
    // Any non-standard modes follow in lexicographic order.
    for (mode, r) in runs {
        if !REPORT_MODES.contains(&mode.as_str()) {
            out.push_str(&format!(
                "{mode},{:.4},{:.4},{:.4},{:.4}\n",
                r.precision, r.recall, r.f1, r.macro_f1
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn perfect_prediction_counts() {
        let c = confusion(&[1, 1, 0], &[1, 1, 0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 0, fn_: 0, tn: 1 });
    }

    #[test]
    fn total_disagreement_has_no_true_counts() {
        let c = confusion(&[1, 0, 1], &[0, 1, 0]).unwrap();
        assert_eq!(c.tp, 0);
        assert_eq!(c.tn, 0);
        assert_eq!(c.fp + c.fn_, 3);
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        assert!(confusion(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn recount_oracle_on_random_labels() {
        let mut rng = crate::seeding::rng_from(31);
        let preds: Vec<Label> = (0..1000).map(|_| rng.gen_range(0..=1)).collect();
        let truths: Vec<Label> = (0..1000).map(|_| rng.gen_range(0..=1)).collect();
        let c = confusion(&preds, &truths).unwrap();
        // Independent tallying pass.
        let mut tally = [0usize; 4];
        for i in 0..1000 {
            tally[(preds[i] * 2 + truths[i]) as usize] += 1;
        }
        assert_eq!(c.tn, tally[0]);
        assert_eq!(c.fn_, tally[1]);
        assert_eq!(c.fp, tally[2]);
        assert_eq!(c.tp, tally[3]);
        assert_eq!(c.total(), 1000);
    }

    #[test]
    fn hand_derived_metric_example() {
        let counts = ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 };
        let m = metrics(&counts).unwrap();
        assert_abs_diff_eq!(m.precision, 0.75, epsilon = 1e-9);
        assert_abs_diff_eq!(m.recall, 0.6, epsilon = 1e-9);
        assert_abs_diff_eq!(m.f1, 0.666_667, epsilon = 1e-6);
        assert_abs_diff_eq!(m.f1_non_tumor, 0.727_273, epsilon = 1e-6);
        assert_abs_diff_eq!(m.macro_f1, 0.696_970, epsilon = 1e-6);
        assert!(m.zero_division_flags.is_empty());
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let counts = ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 7 };
        let m = metrics(&counts).unwrap();
        assert_eq!(
            (m.precision, m.recall, m.f1, m.macro_f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn zero_denominator_sets_flag() {
        // tp = 0 with fp > 0: precision computes to 0; recall and tumor F1
        // hit 0/0 and are zeroed with flags.
        let counts = ConfusionCounts { tp: 0, fp: 3, fn_: 0, tn: 4 };
        let m = metrics(&counts).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert!(m.zero_division_flags.iter().any(|f| f == "recall"));
        assert!(m.zero_division_flags.iter().any(|f| f == "f1_tumor"));

        // No predicted positives at all: precision itself is flagged.
        let counts = ConfusionCounts { tp: 0, fp: 0, fn_: 2, tn: 4 };
        let m = metrics(&counts).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.zero_division_flags.iter().any(|f| f == "precision"));
    }

    #[test]
    fn empty_counts_rejected() {
        assert!(metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn swapping_positive_class_swaps_f1s_and_keeps_macro() {
        let counts = ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 };
        let swapped = ConfusionCounts { tp: 4, fp: 2, fn_: 1, tn: 3 };
        let m = metrics(&counts).unwrap();
        let s = metrics(&swapped).unwrap();
        assert_abs_diff_eq!(m.f1_tumor, s.f1_non_tumor, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1_non_tumor, s.f1_tumor, epsilon = 1e-12);
        assert_abs_diff_eq!(m.macro_f1, s.macro_f1, epsilon = 1e-12);
    }

    #[test]
    fn ari_identical_partitions_is_one() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_abs_diff_eq!(adjusted_rand_index(&a, &a), 1.0, epsilon = 1e-12);
        // Relabeled but identical structure.
        let b = [5, 5, 9, 9, 7, 7];
        assert_abs_diff_eq!(adjusted_rand_index(&a, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ari_hand_computed_case() {
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 2, 2];
        // joint pairs: C(2,2)+C(1,2)+C(1,2)+C(2,2) = 2; rows: 2*C(3,2) = 6;
        // cols: 3*C(2,2) = 3; expected = 6*3/C(6,2) = 1.2; max = 4.5.
        let expected = (2.0 - 1.2) / (4.5 - 1.2);
        assert_abs_diff_eq!(adjusted_rand_index(&a, &b), expected, epsilon = 1e-12);
    }

    #[test]
    fn comparison_rows_render_in_fixed_order() {
        let mk = |p: f64| MetricsReport {
            precision: p,
            recall: p,
            f1: p,
            f1_tumor: p,
            f1_non_tumor: p,
            macro_f1: p,
            counts: ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 1 },
            zero_division_flags: vec![],
            pixel_accuracy: None,
        };
        let mut runs = BTreeMap::new();
        runs.insert("full".to_string(), mk(0.9));
        runs.insert("baseline_ce".to_string(), mk(0.123456));
        runs.insert("baseline_ce_supcon".to_string(), mk(0.5));
        let csv = comparison_csv(&runs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "mode,precision,recall,f1,macro_f1");
        assert!(lines[1].starts_with("baseline_ce,0.1235"));
        assert!(lines[2].starts_with("baseline_ce_supcon,0.5000"));
        assert!(lines[3].starts_with("full,0.9000"));
    }
}
