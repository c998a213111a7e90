//! Tiling WSIs into single-class labeled patches and the patch manifest.
//!
//! A tile is emitted only when its mask window is uniformly one class;
//! mixed tiles are discarded, at pixel granularity with zero tolerance.

use crate::error::{Error, Result};
use crate::img;
use crate::synth::{Split, WsiRecord};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Patch class label: 0 = non-tumor, 1 = tumor.
pub type Label = u8;

pub const PATCH_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub wsi_id: String,
    pub row: usize,
    pub col: usize,
    pub label: Label,
    pub image_path: String,
}

/// A record plus its pixels, before or after persistence.
#[derive(Debug, Clone)]
pub struct TiledPatch {
    pub record: PatchRecord,
    /// (patch_size, patch_size, 3)
    pub image: Array3<u8>,
}

/// Tile one WSI. Output order is row-major and deterministic. Only tiles
/// fully inside the image are considered; no padding.
pub fn tile_wsi(wsi: &WsiRecord, patch_size: usize, stride: usize) -> Result<Vec<TiledPatch>> {
    let (h, w) = wsi.mask.dim();
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(Error::invalid(format!(
            "patch_size {patch_size} exceeds image dimensions {h}x{w}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }

    let mut out = Vec::new();
    let mut row = 0;
    let mut y = 0;
    while y + patch_size <= h {
        let mut col = 0;
        let mut x = 0;
        while x + patch_size <= w {
            if let Some(label) = uniform_label(wsi, y, x, patch_size) {
                let record = PatchRecord {
                    patch_id: format!("{}:r{row}:c{col}", wsi.wsi_id),
                    wsi_id: wsi.wsi_id.clone(),
                    row,
                    col,
                    label,
                    image_path: format!("images/{}_r{row:03}_c{col:03}.png", wsi.wsi_id),
                };
                let image = wsi
                    .image
                    .slice(ndarray::s![y..y + patch_size, x..x + patch_size, ..])
                    .to_owned();
                out.push(TiledPatch { record, image });
            }
            col += 1;
            x += stride;
        }
        row += 1;
        y += stride;
    }
    Ok(out)
}

fn uniform_label(wsi: &WsiRecord, y0: usize, x0: usize, size: usize) -> Option<Label> {
    let first = wsi.mask[[y0, x0]];
    let window = wsi.mask.slice(ndarray::s![y0..y0 + size, x0..x0 + size]);
    window.iter().all(|&v| v == first).then_some(first)
}

/// Patch records plus the per-WSI per-class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDataset {
    pub records: Vec<PatchRecord>,
    /// wsi_id -> [non-tumor patch ids, tumor patch ids]
    pub index: BTreeMap<String, [Vec<String>; 2]>,
}

impl PatchDataset {
    pub fn from_records(records: Vec<PatchRecord>) -> Self {
        let index = Self::build_index(&records);
        PatchDataset { records, index }
    }

    /// Rebuild the index from records; equality with the stored index is the
    /// consistency check.
    pub fn build_index(records: &[PatchRecord]) -> BTreeMap<String, [Vec<String>; 2]> {
        let mut index: BTreeMap<String, [Vec<String>; 2]> = BTreeMap::new();
        for r in records {
            let entry = index.entry(r.wsi_id.clone()).or_default();
            entry[r.label as usize].push(r.patch_id.clone());
        }
        index
    }

    pub fn index_consistent(&self) -> bool {
        // WSIs with zero patches keep an (empty) entry that a rebuild cannot
        // recover, so compare only nonempty entries.
        let rebuilt = Self::build_index(&self.records);
        self.index
            .iter()
            .filter(|(_, lists)| !lists[0].is_empty() || !lists[1].is_empty())
            .all(|(k, v)| rebuilt.get(k) == Some(v))
            && rebuilt.iter().all(|(k, v)| self.index.get(k) == Some(v))
    }

    pub fn patches_of(&self, wsi_id: &str, label: Label) -> &[String] {
        self.index
            .get(wsi_id)
            .map(|lists| lists[label as usize].as_slice())
            .unwrap_or(&[])
    }
}

/// Per-class patch counts for one split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub non_tumor: usize,
    pub tumor: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub per_split: BTreeMap<String, SplitCounts>,
    pub total_patches: usize,
    /// WSIs that yielded zero single-class tiles.
    pub empty_wsis: Vec<String>,
}

/// Everything `build_dataset` produces: manifest-shaped records, the pixels
/// keyed by patch id, and the count summary.
#[derive(Debug)]
pub struct BuiltDataset {
    pub dataset: PatchDataset,
    pub images: BTreeMap<String, Array3<u8>>,
    pub summary: DatasetSummary,
}

/// Tile every WSI (optionally restricted to one split) and assemble the
/// dataset with its per-WSI per-class index.
pub fn build_dataset(
    wsis: &[WsiRecord],
    split_filter: Option<Split>,
    patch_size: usize,
    stride: usize,
) -> Result<BuiltDataset> {
    if wsis.is_empty() {
        return Err(Error::invalid("empty WSI set"));
    }
    let selected: Vec<&WsiRecord> = wsis
        .iter()
        .filter(|w| split_filter.map_or(true, |s| w.split == s))
        .collect();
    if selected.is_empty() {
        return Err(Error::invalid(format!(
            "no WSIs in split filter {split_filter:?}"
        )));
    }

    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    let mut index: BTreeMap<String, [Vec<String>; 2]> = BTreeMap::new();
    let mut summary = DatasetSummary::default();

    for wsi in &selected {
        let tiles = tile_wsi(wsi, patch_size, stride)?;
        index.entry(wsi.wsi_id.clone()).or_default();
        if tiles.is_empty() {
            summary.empty_wsis.push(wsi.wsi_id.clone());
        }
        let counts = summary.per_split.entry(wsi.split.to_string()).or_default();
        for tile in tiles {
            match tile.record.label {
                0 => counts.non_tumor += 1,
                _ => counts.tumor += 1,
            }
            index.entry(wsi.wsi_id.clone()).or_default()[tile.record.label as usize]
                .push(tile.record.patch_id.clone());
            images.insert(tile.record.patch_id.clone(), tile.image);
            records.push(tile.record);
        }
    }
    summary.total_patches = records.len();

    Ok(BuiltDataset {
        dataset: PatchDataset { records, index },
        images,
        summary,
    })
}

/// Write patch PNGs, `patch_manifest.json`, and `summary.json` under `dir`.
pub fn write_patches(built: &BuiltDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir.join("images"), e))?;
    for r in &built.dataset.records {
        let image = &built.images[&r.patch_id];
        img::save_rgb_png(&dir.join(&r.image_path), image)?;
    }
    let manifest_path = dir.join("patch_manifest.json");
    let json = serde_json::to_string_pretty(&built.dataset)
        .map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    let summary_path = dir.join("summary.json");
    let json =
        serde_json::to_string_pretty(&built.summary).map_err(|e| Error::json(&summary_path, e))?;
    fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))
}

/// Load a dataset previously written by [`write_patches`].
pub fn load_patches(dir: &Path) -> Result<(PatchDataset, BTreeMap<String, Array3<u8>>)> {
    let manifest_path = dir.join("patch_manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let dataset: PatchDataset =
        serde_json::from_str(&raw).map_err(|e| Error::json(&manifest_path, e))?;
    if !dataset.index_consistent() {
        return Err(Error::invalid(format!(
            "patch manifest {} index is inconsistent with its records",
            manifest_path.display()
        )));
    }
    let mut images = BTreeMap::new();
    for r in &dataset.records {
        images.insert(r.patch_id.clone(), img::load_rgb_png(&dir.join(&r.image_path))?);
    }
    Ok((dataset, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DomainParams;
    use ndarray::{Array2, Array3};

    fn wsi_with_mask(mask: Array2<u8>) -> WsiRecord {
        let (h, w) = mask.dim();
        let mut image = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                image[[y, x, 0]] = (x % 251) as u8;
                image[[y, x, 1]] = (y % 249) as u8;
                image[[y, x, 2]] = mask[[y, x]] * 200;
            }
        }
        WsiRecord {
            wsi_id: "w0".to_string(),
            image,
            mask,
            domain: DomainParams::default(),
            split: Split::Train,
        }
    }

    #[test]
    fn single_tile_all_zero_mask() {
        let wsi = wsi_with_mask(Array2::zeros((256, 256)));
        let tiles = tile_wsi(&wsi, 256, 256).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].record.label, 0);
        assert_eq!((tiles[0].record.row, tiles[0].record.col), (0, 0));
    }

    #[test]
    fn aligned_halves_give_two_labels() {
        let mut mask = Array2::zeros((512, 512));
        mask.slice_mut(ndarray::s![.., ..256]).fill(1);
        let tiles = tile_wsi(&wsi_with_mask(mask), 256, 256).unwrap();
        assert_eq!(tiles.len(), 4);
        let tumor = tiles.iter().filter(|t| t.record.label == 1).count();
        assert_eq!(tumor, 2);
    }

    #[test]
    fn diagonal_split_emits_nothing() {
        // Diagonal boundary through every tile: each 256-window is mixed.
        let mut mask = Array2::zeros((512, 512));
        for y in 0..512 {
            for x in 0..512 {
                if x % 256 > y % 256 {
                    mask[[y, x]] = 1;
                }
            }
        }
        let tiles = tile_wsi(&wsi_with_mask(mask), 256, 256).unwrap();
        assert!(tiles.is_empty());
    }

    #[test]
    fn patch_size_larger_than_image_rejected() {
        let wsi = wsi_with_mask(Array2::zeros((256, 256)));
        assert!(tile_wsi(&wsi, 512, 512).is_err());
    }

    #[test]
    fn tile_count_bound_and_row_major_order() {
        let wsi = wsi_with_mask(Array2::zeros((768, 512)));
        let tiles = tile_wsi(&wsi, 256, 256).unwrap();
        assert_eq!(tiles.len(), 3 * 2);
        let order: Vec<(usize, usize)> =
            tiles.iter().map(|t| (t.record.row, t.record.col)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn dataset_counts_and_index() {
        let mut mask = Array2::zeros((512, 512));
        mask.slice_mut(ndarray::s![.., ..256]).fill(1);
        let mut a = wsi_with_mask(mask.clone());
        a.wsi_id = "a".into();
        let mut b = wsi_with_mask(mask);
        b.wsi_id = "b".into();
        let built = build_dataset(&[a, b], None, 256, 256).unwrap();
        assert_eq!(built.dataset.records.len(), 8);
        assert_eq!(built.dataset.index.len(), 2);
        assert_eq!(built.dataset.patches_of("a", 1).len(), 2);
        assert!(built.dataset.index_consistent());
        let counts = &built.summary.per_split["train"];
        assert_eq!((counts.non_tumor, counts.tumor), (4, 4));
    }

    #[test]
    fn wsi_without_uniform_tiles_is_flagged() {
        let mut mask = Array2::zeros((256, 256));
        mask[[0, 0]] = 1;
        let wsi = wsi_with_mask(mask);
        let built = build_dataset(&[wsi], None, 256, 256).unwrap();
        assert_eq!(built.summary.empty_wsis, vec!["w0".to_string()]);
        assert!(built.dataset.index.contains_key("w0"));
        assert!(built.dataset.patches_of("w0", 0).is_empty());
    }

    #[test]
    fn empty_wsi_set_rejected() {
        assert!(build_dataset(&[], None, 256, 256).is_err());
    }

    #[test]
    fn patches_round_trip_through_disk() {
        let mut mask = Array2::zeros((512, 512));
        mask.slice_mut(ndarray::s![.., ..256]).fill(1);
        let built = build_dataset(&[wsi_with_mask(mask)], None, 256, 256).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_patches(&built, dir.path()).unwrap();
        let (dataset, images) = load_patches(dir.path()).unwrap();
        assert_eq!(dataset, built.dataset);
        for (id, img) in &built.images {
            assert_eq!(images[id], *img);
        }
    }
}
