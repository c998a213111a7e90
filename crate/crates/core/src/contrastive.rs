//! The loss core: temperature-scaled similarity, per-(WSI, class)
//! prototypes, the WSI-level and patch-level contrastive losses, and the
//! combined objective, together with analytic gradients for the trainer.
//!
//! Similarity is `S(a, b) = exp((a . b) / tau)` on unit vectors, so every
//! denominator is strictly positive and each log argument lies in (0, 1].

use crate::error::{Error, Result};
use crate::patch::Label;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Loss hyperparameters. Temperatures for the two contrastive levels are
/// independently configurable; weights default to the unweighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature_wsi: f64,
    pub temperature_patch: f64,
    /// Weights on (WSI-level, patch-level, cross-entropy).
    pub weights: (f64, f64, f64),
    /// Also accept same-class prototypes from the anchor's own WSI as
    /// positives (vacuous with one prototype per class per WSI).
    pub include_same_wsi_positives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature_wsi: 0.1,
            temperature_patch: 0.1,
            weights: (1.0, 1.0, 1.0),
            include_same_wsi_positives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature_wsi <= 0.0 || self.temperature_patch <= 0.0 {
            return Err(Error::invalid("temperatures must be > 0"));
        }
        Ok(())
    }
}

/// `exp((v1 . v2) / tau)` for unit vectors.
pub fn similarity<T: Scalar>(v1: ArrayView1<T>, v2: ArrayView1<T>, tau: T) -> Result<T> {
    if tau <= T::zero() {
        return Err(Error::invalid("temperature must be > 0"));
    }
    if v1.iter().chain(v2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("similarity input contains non-finite values"));
    }
    let dot: T = v1.iter().zip(v2.iter()).map(|(&a, &b)| a * b).sum();
    Ok((dot / tau).exp())
}

/// One per-(WSI, class) prototype: the renormalized mean of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<T: Scalar> {
    pub wsi_id: String,
    pub label: Label,
    /// Unit-norm prototype vector.
    pub vector: Array1<T>,
    /// Batch indices of the member embeddings.
    pub members: Vec<usize>,
}

impl<T: Scalar> Prototype<T> {
    pub fn member_count(&self) -> usize {
        self.members.len()
    }
}

/// Prototypes of a batch, sorted by (wsi_id, label).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T: Scalar> {
    pub entries: Vec<Prototype<T>>,
}

fn check_unit_rows<T: Scalar>(embeddings: ArrayView2<T>) -> Result<()> {
    for (i, row) in embeddings.rows().into_iter().enumerate() {
        let norm2: T = row.iter().map(|&v| v * v).sum();
        if !norm2.is_finite() {
            return Err(Error::invalid(format!("embedding {i} is non-finite")));
        }
        if (norm2.to_f64().unwrap() - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!(
                "embedding {i} is not unit-normalized (|v|^2 = {norm2})"
            )));
        }
    }
    Ok(())
}

/// Mean-then-renormalize prototypes, one per (WSI, class) present in the
/// batch. Classes absent from a WSI yield no entry.
pub fn class_prototypes<T: Scalar>(
    embeddings: ArrayView2<T>,
    labels: &[Label],
    wsi_ids: &[String],
) -> Result<PrototypeSet<T>> {
    let n = embeddings.nrows();
    if n == 0 {
        return Err(Error::invalid("no embeddings"));
    }
    if labels.len() != n || wsi_ids.len() != n {
        return Err(Error::invalid("embeddings, labels, wsi_ids length mismatch"));
    }
    check_unit_rows(embeddings)?;

    let mut groups: BTreeMap<(String, Label), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups
            .entry((wsi_ids[i].clone(), labels[i]))
            .or_default()
            .push(i);
    }

    let dim = embeddings.ncols();
    let mut entries = Vec::with_capacity(groups.len());
    for ((wsi_id, label), members) in groups {
        let mut mean = Array1::<T>::zeros(dim);
        for &i in &members {
            mean += &embeddings.row(i);
        }
        let count = T::from_usize(members.len()).unwrap();
        mean.mapv_inplace(|v| v / count);
        let norm = mean.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(Error::DegeneratePrototype { wsi_id, label });
        }
        mean.mapv_inplace(|v| v / norm);
        entries.push(Prototype {
            wsi_id,
            label,
            vector: mean,
            members,
        });
    }
    Ok(PrototypeSet { entries })
}

/// Zero-contribution anchors, surfaced rather than silently dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossDiagnostics {
    pub empty_positive_anchors: usize,
}

/// Positive/negative index sets per anchor on the prototype graph.
fn prototype_pairs<T: Scalar>(
    set: &PrototypeSet<T>,
    include_same_wsi: bool,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = set.entries.len();
    let mut positives = vec![Vec::new(); n];
    let mut negatives = vec![Vec::new(); n];
    for j in 0..n {
        for m in 0..n {
            if m == j {
                continue;
            }
            let (a, b) = (&set.entries[j], &set.entries[m]);
            if a.label == b.label {
                if include_same_wsi || a.wsi_id != b.wsi_id {
                    positives[j].push(m);
                }
            } else {
                negatives[j].push(m);
            }
        }
    }
    (positives, negatives)
}

/// Shared evaluation of the contrastive sum
/// `sum_j -1/|P_j| sum_{p in P_j} log( S_jp / (S_jp + sum_{n in N_j} S_jn) )`.
fn contrastive_sum<T: Scalar>(
    vectors: &[ArrayView1<T>],
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    tau: T,
) -> Result<(T, LossDiagnostics)> {
    let mut total = T::zero();
    let mut diag = LossDiagnostics::default();
    for j in 0..vectors.len() {
        if positives[j].is_empty() {
            diag.empty_positive_anchors += 1;
            continue;
        }
        let neg_sum: T = negatives[j]
            .iter()
            .map(|&m| similarity(vectors[j], vectors[m], tau))
            .sum::<Result<T>>()?;
        let inv_p = T::one() / T::from_usize(positives[j].len()).unwrap();
        for &p in &positives[j] {
            let s_pos = similarity(vectors[j], vectors[p], tau)?;
            total -= inv_p * (s_pos / (s_pos + neg_sum)).ln();
        }
    }
    Ok((total, diag))
}

/// WSI-level contrastive loss over the prototypes of one WSI pair.
/// Positives are same-class prototypes from the other WSI; negatives are
/// different-class prototypes from both. Anchors with no positive
/// contribute zero and are counted in the diagnostics.
pub fn wsi_level_loss<T: Scalar>(
    prototypes: &PrototypeSet<T>,
    config: &LossConfig,
) -> Result<(T, LossDiagnostics)> {
    config.validate()?;
    validate_pair_set(prototypes)?;
    let (positives, negatives) = prototype_pairs(prototypes, config.include_same_wsi_positives);
    let vectors: Vec<ArrayView1<T>> = prototypes.entries.iter().map(|e| e.vector.view()).collect();
    contrastive_sum(&vectors, &positives, &negatives, T::from_f64_c(config.temperature_wsi))
}

fn validate_pair_set<T: Scalar>(prototypes: &PrototypeSet<T>) -> Result<()> {
    if prototypes.entries.is_empty() {
        return Err(Error::invalid("empty prototype set"));
    }
    let mut wsis: Vec<&str> = prototypes.entries.iter().map(|e| e.wsi_id.as_str()).collect();
    wsis.sort_unstable();
    wsis.dedup();
    if wsis.len() > 2 {
        return Err(Error::invalid(format!(
            "WSI-level loss expects prototypes from one WSI pair, got {} WSIs",
            wsis.len()
        )));
    }
    Ok(())
}

/// Anchor-indexed positive and negative sets over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PairSpec {
    /// Same-class positives, different-class negatives, anchor excluded.
    pub fn from_labels(labels: &[Label]) -> PairSpec {
        let n = labels.len();
        let mut positives = vec![Vec::new(); n];
        let mut negatives = vec![Vec::new(); n];
        for j in 0..n {
            for m in 0..n {
                if m == j {
                    continue;
                }
                if labels[m] == labels[j] {
                    positives[j].push(m);
                } else {
                    negatives[j].push(m);
                }
            }
        }
        PairSpec { positives, negatives }
    }

    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.positives.len() != batch || self.negatives.len() != batch {
            return Err(Error::invalid(format!(
                "pair spec covers {} anchors, batch has {batch}",
                self.positives.len()
            )));
        }
        for j in 0..batch {
            for &m in self.positives[j].iter().chain(self.negatives[j].iter()) {
                if m >= batch {
                    return Err(Error::invalid(format!(
                        "pair spec index {m} out of range for batch {batch}"
                    )));
                }
                if m == j {
                    return Err(Error::invalid(format!("anchor {j} appears in its own pair set")));
                }
            }
            if self.positives[j].iter().any(|m| self.negatives[j].contains(m)) {
                return Err(Error::invalid(format!(
                    "anchor {j} has overlapping positive and negative sets"
                )));
            }
        }
        Ok(())
    }
}

/// Patch-level contrastive loss over a batch of unit embeddings.
pub fn patch_level_loss<T: Scalar>(
    embeddings: ArrayView2<T>,
    labels: &[Label],
    pair_spec: &PairSpec,
    config: &LossConfig,
) -> Result<(T, LossDiagnostics)> {
    config.validate()?;
    if embeddings.nrows() != labels.len() {
        return Err(Error::invalid("embeddings and labels length mismatch"));
    }
    pair_spec.validate(embeddings.nrows())?;
    check_unit_rows(embeddings)?;
    let vectors: Vec<ArrayView1<T>> = embeddings.rows().into_iter().collect();
    contrastive_sum(
        &vectors,
        &pair_spec.positives,
        &pair_spec.negatives,
        T::from_f64_c(config.temperature_patch),
    )
}

/// Mean cross-entropy of 2-class logits (numerically stabilized).
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<T>, labels: &[Label]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[Label],
) -> Result<(T, Array2<T>)> {
    let n = logits.nrows();
    if n == 0 || n != labels.len() {
        return Err(Error::invalid("logits and labels length mismatch or empty"));
    }
    if logits.ncols() != 2 {
        return Err(Error::invalid("expected 2-class logits"));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = Array2::<T>::zeros((n, 2));
    let mut total = T::zero();
    for i in 0..n {
        let (a, b) = (logits[[i, 0]], logits[[i, 1]]);
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        let z = ea + eb;
        let log_z = z.ln() + m;
        let y = labels[i] as usize;
        total += log_z - logits[[i, y]];
        grad[[i, 0]] = (ea / z - if y == 0 { T::one() } else { T::zero() }) * inv_n;
        grad[[i, 1]] = (eb / z - if y == 1 { T::one() } else { T::zero() }) * inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Components of one step's objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss<T: Scalar> {
    pub wsi: T,
    pub patch: T,
    pub ce: T,
    pub total: T,
}

/// Weighted sum of the three components; defaults weigh them equally.
pub fn total_loss<T: Scalar>(
    loss_wsi: T,
    loss_patch: T,
    logits: ArrayView2<T>,
    labels: &[Label],
    config: &LossConfig,
) -> Result<TotalLoss<T>> {
    let ce = cross_entropy(logits, labels)?;
    let (ww, wp, wc) = config.weights;
    let total = T::from_f64_c(ww) * loss_wsi + T::from_f64_c(wp) * loss_patch + T::from_f64_c(wc) * ce;
    Ok(TotalLoss {
        wsi: loss_wsi,
        patch: loss_patch,
        ce,
        total,
    })
}

/// Gradient core shared by both contrastive levels: accumulates d(loss)/d(vector).
fn contrastive_sum_grad<T: Scalar>(
    vectors: &[ArrayView1<T>],
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    tau: T,
    scale: T,
    grads: &mut [Array1<T>],
) -> Result<(T, LossDiagnostics)> {
    let mut total = T::zero();
    let mut diag = LossDiagnostics::default();
    for j in 0..vectors.len() {
        if positives[j].is_empty() {
            diag.empty_positive_anchors += 1;
            continue;
        }
        let neg_sims: Vec<T> = negatives[j]
            .iter()
            .map(|&m| similarity(vectors[j], vectors[m], tau))
            .collect::<Result<Vec<T>>>()?;
        let neg_sum: T = neg_sims.iter().copied().sum();
        let inv_p = T::one() / T::from_usize(positives[j].len()).unwrap();
        for &p in &positives[j] {
            let s_pos = similarity(vectors[j], vectors[p], tau)?;
            let denom = s_pos + neg_sum;
            total -= inv_p * (s_pos / denom).ln();

            // d(-log(s/(s+N)))/d dot_jp = (s/(s+N) - 1)/tau, and
            // d/d dot_jn = s_n/(s+N)/tau for each negative n.
            let coef_pos = scale * inv_p * (s_pos / denom - T::one()) / tau;
            axpy(grads, j, coef_pos, vectors[p]);
            axpy(grads, p, coef_pos, vectors[j]);
            for (ni, &nidx) in negatives[j].iter().enumerate() {
                let coef_neg = scale * inv_p * (neg_sims[ni] / denom) / tau;
                axpy(grads, j, coef_neg, vectors[nidx]);
                axpy(grads, nidx, coef_neg, vectors[j]);
            }
        }
    }
    Ok((total, diag))
}

fn axpy<T: Scalar>(grads: &mut [Array1<T>], idx: usize, coef: T, v: ArrayView1<T>) {
    grads[idx].zip_mut_with(&v.to_owned(), |g, &x| *g += coef * x);
}

/// Patch-level loss and gradient with respect to the (unit) embeddings.
/// `scale` multiplies the gradient (the loss weight).
pub fn patch_level_loss_grad<T: Scalar>(
    embeddings: ArrayView2<T>,
    labels: &[Label],
    pair_spec: &PairSpec,
    config: &LossConfig,
    scale: T,
) -> Result<(T, Array2<T>, LossDiagnostics)> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::invalid("embeddings and labels length mismatch"));
    }
    pair_spec.validate(embeddings.nrows())?;
    let (n, d) = embeddings.dim();
    let vectors: Vec<ArrayView1<T>> = embeddings.rows().into_iter().collect();
    let mut grads = vec![Array1::<T>::zeros(d); n];
    let (loss, diag) = contrastive_sum_grad(
        &vectors,
        &pair_spec.positives,
        &pair_spec.negatives,
        T::from_f64_c(config.temperature_patch),
        scale,
        &mut grads,
    )?;
    let mut out = Array2::<T>::zeros((n, d));
    for (i, g) in grads.into_iter().enumerate() {
        out.row_mut(i).assign(&g);
    }
    Ok((loss, out, diag))
}

/// WSI-level loss and gradient pushed back to the member embeddings through
/// the renormalized-mean prototype map. Adds into `grad_embeddings`.
pub fn wsi_level_loss_grad<T: Scalar>(
    prototypes: &PrototypeSet<T>,
    embeddings: ArrayView2<T>,
    config: &LossConfig,
    scale: T,
    grad_embeddings: &mut Array2<T>,
) -> Result<(T, LossDiagnostics)> {
    validate_pair_set(prototypes)?;
    let (positives, negatives) = prototype_pairs(prototypes, config.include_same_wsi_positives);
    let vectors: Vec<ArrayView1<T>> = prototypes.entries.iter().map(|e| e.vector.view()).collect();
    let dim = embeddings.ncols();
    let mut proto_grads = vec![Array1::<T>::zeros(dim); vectors.len()];
    let (loss, diag) = contrastive_sum_grad(
        &vectors,
        &positives,
        &negatives,
        T::from_f64_c(config.temperature_wsi),
        scale,
        &mut proto_grads,
    )?;

    // c = m / |m| with m the member mean; dL/dm = (g - c (c.g)) / |m|.
    for (proto, g) in prototypes.entries.iter().zip(proto_grads) {
        let count = T::from_usize(proto.member_count()).unwrap();
        let mut mean = Array1::<T>::zeros(dim);
        for &i in &proto.members {
            mean += &embeddings.row(i);
        }
        mean.mapv_inplace(|v| v / count);
        let norm = mean.iter().map(|&v| v * v).sum::<T>().sqrt();
        let c = &proto.vector;
        let cg: T = c.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
        let dmean = g
            .iter()
            .zip(c.iter())
            .map(|(&gi, &ci)| (gi - ci * cg) / norm)
            .collect::<Array1<T>>();
        for &i in &proto.members {
            let mut row = grad_embeddings.row_mut(i);
            row.zip_mut_with(&dmean, |r, &d| *r += d / count);
        }
    }
    Ok((loss, diag))
}
