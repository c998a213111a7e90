//! Cross-cluster WSI pair sampling: each batch is 2 WSIs x 2 classes x 32
//! patches = 128, with oversampling when a WSI has fewer than 32 patches of
//! a class.

use crate::bovw::PseudoDomainAssignment;
use crate::error::{Error, Result};
use crate::patch::{Label, PatchDataset};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PATCHES_PER_CLASS: usize = 32;
pub const BATCH_SIZE: usize = 4 * PATCHES_PER_CLASS;

/// Which cluster relation defines a WSI pair. `CrossCluster` pulls pairs
/// from different pseudo-domains; `IntraCluster` is the alternative reading
/// that pairs WSIs within one pseudo-domain, kept behind this flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    #[default]
    CrossCluster,
    IntraCluster,
}

/// One sampled training batch: an unordered WSI pair plus 32 patch ids per
/// (WSI, class). Ids may repeat when oversampling kicked in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSpec {
    pub wsi_a: String,
    pub wsi_b: String,
    pub cluster_a: usize,
    pub cluster_b: usize,
    /// `patches[wsi][class]`, each of length [`PATCHES_PER_CLASS`].
    pub patches: [[Vec<String>; 2]; 2],
}

impl BatchSpec {
    /// Flatten to (patch ids, labels, wsi ids) in the fixed order
    /// a/class0, a/class1, b/class0, b/class1.
    pub fn flatten(&self) -> (Vec<String>, Vec<Label>, Vec<String>) {
        let mut ids = Vec::with_capacity(BATCH_SIZE);
        let mut labels = Vec::with_capacity(BATCH_SIZE);
        let mut wsis = Vec::with_capacity(BATCH_SIZE);
        for (w, wsi_id) in [(0, &self.wsi_a), (1, &self.wsi_b)] {
            for class in 0..2 {
                for id in &self.patches[w][class] {
                    ids.push(id.clone());
                    labels.push(class as Label);
                    wsis.push(wsi_id.clone());
                }
            }
        }
        (ids, labels, wsis)
    }

    pub fn total_patches(&self) -> usize {
        self.patches.iter().flatten().map(Vec::len).sum()
    }
}

/// A WSI is eligible for pairing when it has at least one patch of each
/// class and a pseudo-domain assignment.
pub fn eligible_by_cluster(
    dataset: &PatchDataset,
    assignment: &PseudoDomainAssignment,
) -> BTreeMap<usize, Vec<String>> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (wsi_id, lists) in &dataset.index {
        if lists[0].is_empty() || lists[1].is_empty() {
            continue;
        }
        if let Some(cluster) = assignment.cluster_of(wsi_id) {
            out.entry(cluster).or_default().push(wsi_id.clone());
        }
    }
    out
}

/// Sample one batch: uniformly pick an unordered cluster pair, one eligible
/// WSI per cluster, then 32 patch ids per class (without replacement when
/// at least 32 exist, with replacement otherwise).
pub fn sample_batch(
    dataset: &PatchDataset,
    assignment: &PseudoDomainAssignment,
    mode: PairMode,
    rng: &mut impl Rng,
) -> Result<BatchSpec> {
    let eligible = eligible_by_cluster(dataset, assignment);

    let pairs: Vec<(usize, usize)> = match mode {
        PairMode::CrossCluster => {
            let clusters: Vec<usize> = eligible.keys().copied().collect();
            clusters
                .iter()
                .enumerate()
                .flat_map(|(i, &a)| clusters[i + 1..].iter().map(move |&b| (a, b)))
                .collect()
        }
        PairMode::IntraCluster => eligible
            .iter()
            .filter(|(_, wsis)| wsis.len() >= 2)
            .map(|(&c, _)| (c, c))
            .collect(),
    };
    if pairs.is_empty() {
        let populations = eligible.iter().map(|(&c, w)| (c, w.len())).collect();
        return Err(Error::SamplingInfeasible { populations });
    }

    let &(ca, cb) = &pairs[rng.gen_range(0..pairs.len())];
    let (wsi_a, wsi_b) = if ca == cb {
        // Intra-cluster: two distinct WSIs from the same cluster.
        let pool = &eligible[&ca];
        let mut picks = pool.choose_multiple(rng, 2);
        (picks.next().unwrap().clone(), picks.next().unwrap().clone())
    } else {
        (
            eligible[&ca].choose(rng).unwrap().clone(),
            eligible[&cb].choose(rng).unwrap().clone(),
        )
    };

    let mut patches: [[Vec<String>; 2]; 2] = Default::default();
    for (slot, wsi_id) in [(0, &wsi_a), (1, &wsi_b)] {
        for class in 0..2u8 {
            let pool = dataset.patches_of(wsi_id, class);
            debug_assert!(!pool.is_empty(), "eligibility guarantees both classes");
            patches[slot][class as usize] = sample_ids(pool, PATCHES_PER_CLASS, rng);
        }
    }

    Ok(BatchSpec {
        wsi_a,
        wsi_b,
        cluster_a: ca,
        cluster_b: cb,
        patches,
    })
}

/// Without replacement when the pool suffices, with replacement otherwise
/// (the oversampling rule).
fn sample_ids(pool: &[String], count: usize, rng: &mut impl Rng) -> Vec<String> {
    if pool.len() >= count {
        rand::seq::index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect()
    } else {
        (0..count)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::PatchRecord;
    use crate::seeding::rng_from;

    fn record(wsi: &str, n: usize, label: Label) -> Vec<PatchRecord> {
        (0..n)
            .map(|i| PatchRecord {
                patch_id: format!("{wsi}:l{label}:{i}"),
                wsi_id: wsi.to_string(),
                row: i,
                col: label as usize,
                label,
                image_path: String::new(),
            })
            .collect()
    }

    fn dataset(spec: &[(&str, usize, usize)]) -> PatchDataset {
        let mut records = Vec::new();
        for &(wsi, n0, n1) in spec {
            records.extend(record(wsi, n0, 0));
            records.extend(record(wsi, n1, 1));
        }
        PatchDataset::from_records(records)
    }

    fn assignment(map: &[(&str, usize)], k: usize) -> PseudoDomainAssignment {
        PseudoDomainAssignment {
            assignments: map.iter().map(|&(w, c)| (w.to_string(), c)).collect(),
            k,
            k1: 4,
            codebook_seed: 0,
            cluster_seed: 0,
        }
    }

    #[test]
    fn lone_cluster_member_is_always_in_the_pair() {
        let ds = dataset(&[("w1", 40, 40), ("w2", 40, 40), ("w3", 40, 40)]);
        let asg = assignment(&[("w1", 0), ("w2", 0), ("w3", 1)], 2);
        let mut rng = rng_from(1);
        for _ in 0..20 {
            let b = sample_batch(&ds, &asg, PairMode::CrossCluster, &mut rng).unwrap();
            assert!(b.wsi_a == "w3" || b.wsi_b == "w3");
            assert_ne!(b.cluster_a, b.cluster_b);
        }
    }

    #[test]
    fn oversampling_fills_32_from_10() {
        let ds = dataset(&[("w1", 40, 10), ("w2", 40, 40)]);
        let asg = assignment(&[("w1", 0), ("w2", 1)], 2);
        let mut rng = rng_from(2);
        let b = sample_batch(&ds, &asg, PairMode::CrossCluster, &mut rng).unwrap();
        let tumor_of_w1 = if b.wsi_a == "w1" { &b.patches[0][1] } else { &b.patches[1][1] };
        assert_eq!(tumor_of_w1.len(), PATCHES_PER_CLASS);
        let distinct: std::collections::BTreeSet<&String> = tumor_of_w1.iter().collect();
        assert!(distinct.len() <= 10);
        assert_eq!(b.total_patches(), BATCH_SIZE);
    }

    #[test]
    fn without_replacement_when_pool_is_large() {
        let ds = dataset(&[("w1", 64, 64), ("w2", 64, 64)]);
        let asg = assignment(&[("w1", 0), ("w2", 1)], 2);
        let mut rng = rng_from(3);
        let b = sample_batch(&ds, &asg, PairMode::CrossCluster, &mut rng).unwrap();
        for slot in 0..2 {
            for class in 0..2 {
                let ids = &b.patches[slot][class];
                let distinct: std::collections::BTreeSet<&String> = ids.iter().collect();
                assert_eq!(distinct.len(), PATCHES_PER_CLASS);
            }
        }
    }

    #[test]
    fn missing_class_excludes_wsi_from_pairing() {
        // w2 has no tumor patches: only w1 and w3 are eligible.
        let ds = dataset(&[("w1", 40, 40), ("w2", 40, 0), ("w3", 40, 40)]);
        let asg = assignment(&[("w1", 0), ("w2", 1), ("w3", 1)], 2);
        let mut rng = rng_from(4);
        for _ in 0..10 {
            let b = sample_batch(&ds, &asg, PairMode::CrossCluster, &mut rng).unwrap();
            assert!(b.wsi_a != "w2" && b.wsi_b != "w2");
        }
    }

    #[test]
    fn infeasible_pairing_names_cluster_populations() {
        // Both eligible WSIs are in the same cluster.
        let ds = dataset(&[("w1", 40, 40), ("w2", 40, 40)]);
        let asg = assignment(&[("w1", 0), ("w2", 0)], 2);
        let mut rng = rng_from(5);
        match sample_batch(&ds, &asg, PairMode::CrossCluster, &mut rng) {
            Err(Error::SamplingInfeasible { populations }) => {
                assert_eq!(populations, vec![(0, 2)]);
            }
            other => panic!("expected SamplingInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn intra_cluster_mode_pairs_within_a_cluster() {
        let ds = dataset(&[("w1", 40, 40), ("w2", 40, 40), ("w3", 40, 40)]);
        let asg = assignment(&[("w1", 0), ("w2", 0), ("w3", 1)], 2);
        let mut rng = rng_from(6);
        for _ in 0..10 {
            let b = sample_batch(&ds, &asg, PairMode::IntraCluster, &mut rng).unwrap();
            assert_eq!(b.cluster_a, b.cluster_b);
            assert_ne!(b.wsi_a, b.wsi_b);
        }
    }

    #[test]
    fn cluster_pair_frequencies_are_near_uniform() {
        let ds = dataset(&[("w1", 40, 40), ("w2", 40, 40), ("w3", 40, 40)]);
        let asg = assignment(&[("w1", 0), ("w2", 1), ("w3", 2)], 3);
        let mut rng = rng_from(7);
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let n = 3000;
        for _ in 0..n {
            let b = sample_batch(&ds, &asg, PairMode::CrossCluster, &mut rng).unwrap();
            *counts.entry((b.cluster_a.min(b.cluster_b), b.cluster_a.max(b.cluster_b))).or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        for (&pair, &c) in &counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 1.0 / 3.0).abs() < 0.05,
                "pair {pair:?} frequency {freq}"
            );
        }
    }
}
