//! The trainable patch encoder and the frozen style-feature extractor.
//!
//! Backbone choices: `tiny` (three strided conv stages behind a 4x average-
//! pool stem; the desk-scale default) and `resnet18_like` (four stages of
//! two norm-free residual blocks). Either way the head is a projection of
//! exactly two affine layers with one ReLU between them; embeddings are
//! L2-normalized before any similarity computation. A separate linear head
//! produces 2-class logits from the normalized embedding.

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward, init_conv,
    init_linear, l2_normalize, l2_normalize_backward, relu1, relu1_backward, relu3,
    relu3_backward, ConvSpec, LinearSpec,
};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng_from};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

pub const PATCH_SIDE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneDepth {
    Tiny,
    Resnet18Like,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone_depth: BackboneDepth,
    /// Projection output dimension D.
    pub embed_dim: usize,
    /// Width of the hidden affine layer in the projection.
    pub proj_hidden: usize,
    /// Paper-fidelity flag; no bundled weights exist, so `true` is rejected
    /// at construction time.
    pub pretrained_init: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone_depth: BackboneDepth::Tiny,
            embed_dim: 128,
            proj_hidden: 128,
            pretrained_init: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.proj_hidden == 0 {
            return Err(Error::invalid("embed_dim and proj_hidden must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Stage {
    AvgPool { k: usize },
    Conv { spec: ConvSpec, relu: bool },
    Block { conv1: ConvSpec, conv2: ConvSpec, skip: Option<ConvSpec> },
}

#[derive(Debug, Clone)]
struct Architecture {
    /// Parameter-free pooling applied during preprocessing (tiny backbone).
    stem_pool: Option<usize>,
    stages: Vec<Stage>,
    proj1: LinearSpec,
    proj2: LinearSpec,
    classifier: LinearSpec,
    feature_dim: usize,
    param_count: usize,
}

struct ArchBuilder {
    next: usize,
}

impl ArchBuilder {
    fn conv(&mut self, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> ConvSpec {
        let w_off = self.next;
        let b_off = w_off + out_ch * in_ch * kernel * kernel;
        self.next = w_off + ConvSpec::param_count(in_ch, out_ch, kernel);
        ConvSpec { in_ch, out_ch, kernel, stride, w_off, b_off }
    }

    fn linear(&mut self, in_dim: usize, out_dim: usize) -> LinearSpec {
        let w_off = self.next;
        let b_off = w_off + out_dim * in_dim;
        self.next = w_off + LinearSpec::param_count(in_dim, out_dim);
        LinearSpec { in_dim, out_dim, w_off, b_off }
    }
}

fn build_architecture(config: &EncoderConfig) -> Architecture {
    let mut b = ArchBuilder { next: 0 };
    let (stem_pool, stages, feature_dim) = match config.backbone_depth {
        BackboneDepth::Tiny => {
            let stages = vec![
                Stage::Conv { spec: b.conv(3, 8, 3, 2), relu: true },
                Stage::Conv { spec: b.conv(8, 16, 3, 2), relu: true },
                Stage::Conv { spec: b.conv(16, 32, 3, 2), relu: true },
            ];
            (Some(4), stages, 32)
        }
        BackboneDepth::Resnet18Like => {
            let mut stages = vec![
                Stage::Conv { spec: b.conv(3, 64, 7, 2), relu: true },
                Stage::AvgPool { k: 2 },
            ];
            let plan = [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
            for &(in_ch, out_ch, stride) in &plan {
                // First block of the stage may change width/stride.
                let skip = (in_ch != out_ch || stride != 1)
                    .then(|| b.conv(in_ch, out_ch, 1, stride));
                stages.push(Stage::Block {
                    conv1: b.conv(in_ch, out_ch, 3, stride),
                    conv2: b.conv(out_ch, out_ch, 3, 1),
                    skip,
                });
                stages.push(Stage::Block {
                    conv1: b.conv(out_ch, out_ch, 3, 1),
                    conv2: b.conv(out_ch, out_ch, 3, 1),
                    skip: None,
                });
            }
            (None, stages, 512)
        }
    };
    let proj1 = b.linear(feature_dim, config.proj_hidden);
    let proj2 = b.linear(config.proj_hidden, config.embed_dim);
    let classifier = b.linear(config.embed_dim, 2);
    Architecture {
        stem_pool,
        stages,
        proj1,
        proj2,
        classifier,
        feature_dim,
        param_count: b.next,
    }
}

/// Forward activations kept for the backward pass of one sample.
pub struct SampleCache<T: Scalar> {
    stage_inputs: Vec<StageCache<T>>,
    gap_in_dim: (usize, usize, usize),
    feat: Array1<T>,
    h1: Array1<T>,
    a1: Array1<T>,
    norm: T,
    v: Array1<T>,
}

enum StageCache<T: Scalar> {
    AvgPool { k: usize },
    Conv { x: Array3<T>, pre: Array3<T>, relu: bool },
    Block { x: Array3<T>, p1: Array3<T>, a1: Array3<T>, z: Array3<T> },
}

/// Forward results for a training batch.
pub struct BatchCache<T: Scalar> {
    samples: Vec<SampleCache<T>>,
    pub embeddings: Array2<T>,
    pub logits: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    config: EncoderConfig,
    arch: Architecture,
    params: Vec<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.pretrained_init {
            return Err(Error::invalid(
                "pretrained_init requested, but no pretrained weights are bundled; \
                 set pretrained_init to false",
            ));
        }
        let arch = build_architecture(config);
        let mut params = vec![T::zero(); arch.param_count];
        let mut rng = rng_from(derive_seed(seed, "encoder-init", 0));
        for stage in &arch.stages {
            match stage {
                Stage::AvgPool { .. } => {}
                Stage::Conv { spec, .. } => init_conv(spec, &mut params, &mut rng),
                Stage::Block { conv1, conv2, skip } => {
                    init_conv(conv1, &mut params, &mut rng);
                    init_conv(conv2, &mut params, &mut rng);
                    if let Some(s) = skip {
                        init_conv(s, &mut params, &mut rng);
                    }
                }
            }
        }
        init_linear(&arch.proj1, &mut params, 2.0, &mut rng);
        init_linear(&arch.proj2, &mut params, 1.0, &mut rng);
        init_linear(&arch.classifier, &mut params, 1.0, &mut rng);
        Ok(Encoder { config: config.clone(), arch, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count
    }

    /// Width of the backbone output (the projection head's input).
    pub fn backbone_feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Flat-buffer range of the classifier head's parameters.
    pub fn classifier_range(&self) -> Range<usize> {
        let c = &self.arch.classifier;
        c.w_off..c.b_off + c.out_dim
    }

    /// Validate shape, scale to [0,1], transpose to (3, H, W), and apply the
    /// parameter-free stem pooling if the backbone has one. Trainers cache
    /// this per patch; it is a pure function of the pixels.
    pub fn preprocess(&self, img: &Array3<u8>) -> Result<Array3<T>> {
        let (h, w, c) = img.dim();
        if h != PATCH_SIDE || w != PATCH_SIDE || c != 3 {
            return Err(Error::invalid(format!(
                "expected {PATCH_SIDE}x{PATCH_SIDE}x3 patch, got {h}x{w}x{c}"
            )));
        }
        let scale = T::from_f64_c(1.0 / 255.0);
        let mut out = Array3::<T>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    out[[ch, y, x]] = T::from_u8(img[[y, x, ch]]).unwrap() * scale;
                }
            }
        }
        Ok(match self.arch.stem_pool {
            Some(k) => avg_pool(&out, k),
            None => out,
        })
    }

    fn forward_one(&self, prepped: &Array3<T>) -> SampleCache<T> {
        let params = &self.params;
        let mut cur = prepped.clone();
        let mut stage_inputs = Vec::with_capacity(self.arch.stages.len());
        for stage in &self.arch.stages {
            match stage {
                Stage::AvgPool { k } => {
                    stage_inputs.push(StageCache::AvgPool { k: *k });
                    cur = avg_pool(&cur, *k);
                }
                Stage::Conv { spec, relu } => {
                    let pre = spec.forward(params, &cur);
                    let out = if *relu { relu3(&pre) } else { pre.clone() };
                    stage_inputs.push(StageCache::Conv { x: cur, pre, relu: *relu });
                    cur = out;
                }
                Stage::Block { conv1, conv2, skip } => {
                    let p1 = conv1.forward(params, &cur);
                    let a1 = relu3(&p1);
                    let mut z = conv2.forward(params, &a1);
                    match skip {
                        Some(s) => z += &s.forward(params, &cur),
                        None => z += &cur,
                    }
                    let out = relu3(&z);
                    stage_inputs.push(StageCache::Block { x: cur, p1, a1, z });
                    cur = out;
                }
            }
        }
        let gap_in_dim = cur.dim();
        let feat = global_avg_pool(&cur);
        let h1 = self.arch.proj1.forward(params, &feat);
        let a1 = relu1(&h1);
        let z = self.arch.proj2.forward(params, &a1);
        let (v, norm) = l2_normalize(&z);
        SampleCache { stage_inputs, gap_in_dim, feat, h1, a1, norm, v }
    }

    /// Inference-mode embedding of raw patches: (batch, D) unit rows.
    pub fn embed(&self, patches: &[&Array3<u8>]) -> Result<Array2<T>> {
        let prepped: Result<Vec<Array3<T>>> =
            patches.iter().map(|p| self.preprocess(p)).collect();
        let prepped = prepped?;
        let refs: Vec<&Array3<T>> = prepped.iter().collect();
        Ok(self.embed_prepped(&refs))
    }

    pub fn embed_prepped(&self, prepped: &[&Array3<T>]) -> Array2<T> {
        let rows: Vec<Array1<T>> = prepped
            .par_iter()
            .map(|x| self.forward_one(x).v)
            .collect();
        let mut out = Array2::<T>::zeros((rows.len(), self.config.embed_dim));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        out
    }

    /// 2-class logits from (unit) embeddings.
    pub fn classify(&self, embeddings: ArrayView2<T>) -> Result<Array2<T>> {
        if embeddings.ncols() != self.config.embed_dim {
            return Err(Error::invalid(format!(
                "expected embeddings of dim {}, got {}",
                self.config.embed_dim,
                embeddings.ncols()
            )));
        }
        let mut out = Array2::<T>::zeros((embeddings.nrows(), 2));
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let logits = self.arch.classifier.forward(&self.params, &row.to_owned());
            out.row_mut(i).assign(&logits);
        }
        Ok(out)
    }

    /// Training-mode forward pass keeping per-sample caches.
    pub fn forward_train(&self, prepped: &[&Array3<T>]) -> BatchCache<T> {
        let samples: Vec<SampleCache<T>> = prepped
            .par_iter()
            .map(|x| self.forward_one(x))
            .collect();
        let n = samples.len();
        let mut embeddings = Array2::<T>::zeros((n, self.config.embed_dim));
        let mut logits = Array2::<T>::zeros((n, 2));
        for (i, s) in samples.iter().enumerate() {
            embeddings.row_mut(i).assign(&s.v);
            let l = self.arch.classifier.forward(&self.params, &s.v);
            logits.row_mut(i).assign(&l);
        }
        BatchCache { samples, embeddings, logits }
    }

    /// Backward pass: gradients of the batch objective with respect to every
    /// parameter, given d(loss)/d(embedding) and d(loss)/d(logits).
    /// Per-sample gradients are reduced in batch order, so the result is
    /// deterministic regardless of thread scheduling.
    pub fn backward(
        &self,
        cache: &BatchCache<T>,
        grad_v: ArrayView2<T>,
        grad_logits: ArrayView2<T>,
    ) -> Vec<T> {
        let per_sample: Vec<Vec<T>> = cache
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.backward_one(s, grad_v.row(i), grad_logits.row(i)))
            .collect();
        let mut total = vec![T::zero(); self.arch.param_count];
        for g in per_sample {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        total
    }

    fn backward_one(
        &self,
        s: &SampleCache<T>,
        grad_v: ArrayView1<T>,
        grad_logits: ArrayView1<T>,
    ) -> Vec<T> {
        let params = &self.params;
        let mut gp = vec![T::zero(); self.arch.param_count];

        let glog = grad_logits.to_owned();
        let dv_cls = self.arch.classifier.backward(params, &s.v, &glog, &mut gp);
        let dv = &dv_cls + &grad_v;
        let dz = l2_normalize_backward(&s.v, s.norm, &dv);
        let da1 = self.arch.proj2.backward(params, &s.a1, &dz, &mut gp);
        let dh1 = relu1_backward(&s.h1, &da1);
        let dfeat = self.arch.proj1.backward(params, &s.feat, &dh1, &mut gp);
        let mut dcur = global_avg_pool_backward(&dfeat, s.gap_in_dim);

        for (stage, stage_cache) in self.arch.stages.iter().zip(&s.stage_inputs).rev() {
            match (stage, stage_cache) {
                (Stage::AvgPool { .. }, StageCache::AvgPool { k }) => {
                    dcur = avg_pool_backward(&dcur, *k);
                }
                (Stage::Conv { spec, .. }, StageCache::Conv { x, pre, relu }) => {
                    let dpre = if *relu { relu3_backward(pre, &dcur) } else { dcur.clone() };
                    dcur = spec.backward(params, x, &dpre, &mut gp);
                }
                (Stage::Block { conv1, conv2, skip }, StageCache::Block { x, p1, a1, z }) => {
                    let dz = relu3_backward(z, &dcur);
                    let da1 = conv2.backward(params, a1, &dz, &mut gp);
                    let dp1 = relu3_backward(p1, &da1);
                    let mut dx = conv1.backward(params, x, &dp1, &mut gp);
                    match skip {
                        Some(sk) => dx += &sk.backward(params, x, &dz, &mut gp),
                        None => dx += &dz,
                    }
                    dcur = dx;
                }
                _ => unreachable!("stage/cache mismatch"),
            }
        }
        gp
    }
}

impl<T: Scalar> Encoder<T> {
    /// One SGD step: `p -= lr * g`.
    pub fn sgd_step(&mut self, grads: &[T], lr: T) {
        debug_assert_eq!(grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads) {
            *p -= lr * *g;
        }
    }
}

/// Which signal the frozen style extractor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    /// Channel-wise mean/std of the first two conv stages of the frozen,
    /// initialization-time encoder.
    EarlyConv,
    /// Channel-wise mean/std of the raw color channels.
    ColorStats,
}

/// Frozen style-feature extractor. Snapshots the encoder's parameters at
/// construction; optimizer updates to the live encoder never reach it.
#[derive(Debug, Clone)]
pub struct StyleExtractor<T: Scalar> {
    mode: StyleMode,
    arch: Architecture,
    frozen_params: Vec<T>,
}

impl<T: Scalar> StyleExtractor<T> {
    pub fn from_encoder(encoder: &Encoder<T>, mode: StyleMode) -> Self {
        StyleExtractor {
            mode,
            arch: encoder.arch.clone(),
            frozen_params: encoder.params.clone(),
        }
    }

    pub fn mode(&self) -> StyleMode {
        self.mode
    }

    pub fn feature_dim(&self) -> usize {
        match self.mode {
            StyleMode::ColorStats => 6,
            StyleMode::EarlyConv => {
                let mut dim = 0;
                let mut seen = 0;
                for stage in &self.arch.stages {
                    let ch = match stage {
                        Stage::AvgPool { .. } => continue,
                        Stage::Conv { spec, .. } => spec.out_ch,
                        Stage::Block { conv2, .. } => conv2.out_ch,
                    };
                    dim += 2 * ch;
                    seen += 1;
                    if seen == 2 {
                        break;
                    }
                }
                dim
            }
        }
    }

    /// Style vector of one raw 256x256x3 patch: concatenated per-channel
    /// means followed by per-channel standard deviations.
    pub fn features(&self, patch: &Array3<u8>) -> Result<Array1<T>> {
        let (h, w, c) = patch.dim();
        if h != PATCH_SIDE || w != PATCH_SIDE || c != 3 {
            return Err(Error::invalid(format!(
                "expected {PATCH_SIDE}x{PATCH_SIDE}x3 patch, got {h}x{w}x{c}"
            )));
        }
        match self.mode {
            StyleMode::ColorStats => {
                // Integer-domain sums keep the stats exact: a constant patch
                // produces a standard deviation of exactly zero.
                let mut out = Array1::<T>::zeros(6);
                let n = (h * w) as u64;
                for ch in 0..3 {
                    let mut sum: u64 = 0;
                    let mut sum_sq: u64 = 0;
                    for y in 0..h {
                        for x in 0..w {
                            let v = patch[[y, x, ch]] as u64;
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mean = sum as f64 / (n as f64 * 255.0);
                    let var_num = (n * sum_sq - sum * sum) as f64;
                    let var = var_num / (n as f64 * n as f64 * 255.0 * 255.0);
                    out[ch] = T::from_f64_c(mean);
                    out[3 + ch] = T::from_f64_c(var.sqrt());
                }
                Ok(out)
            }
            StyleMode::EarlyConv => {
                let scale = T::from_f64_c(1.0 / 255.0);
                let mut x = Array3::<T>::zeros((3, h, w));
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..3 {
                            x[[ch, y, xx]] = T::from_u8(patch[[y, xx, ch]]).unwrap() * scale;
                        }
                    }
                }
                let mut cur = match self.arch.stem_pool {
                    Some(k) => avg_pool(&x, k),
                    None => x,
                };
                let mut stats = Vec::new();
                let mut seen = 0;
                for stage in &self.arch.stages {
                    match stage {
                        Stage::AvgPool { k } => cur = avg_pool(&cur, *k),
                        Stage::Conv { spec, relu } => {
                            let pre = spec.forward(&self.frozen_params, &cur);
                            cur = if *relu { relu3(&pre) } else { pre };
                            stats.push(channel_stats(&cur));
                            seen += 1;
                        }
                        Stage::Block { conv1, conv2, skip } => {
                            let p1 = conv1.forward(&self.frozen_params, &cur);
                            let a1 = relu3(&p1);
                            let mut z = conv2.forward(&self.frozen_params, &a1);
                            match skip {
                                Some(s) => z += &s.forward(&self.frozen_params, &cur),
                                None => z += &cur,
                            }
                            cur = relu3(&z);
                            stats.push(channel_stats(&cur));
                            seen += 1;
                        }
                    }
                    if seen == 2 {
                        break;
                    }
                }
                let dim: usize = stats.iter().map(|(m, _)| 2 * m.len()).sum();
                let mut out = Array1::<T>::zeros(dim);
                let mut at = 0;
                for (means, stds) in stats {
                    for v in means {
                        out[at] = v;
                        at += 1;
                    }
                    for v in stds {
                        out[at] = v;
                        at += 1;
                    }
                }
                Ok(out)
            }
        }
    }
}

fn channel_stats<T: Scalar>(x: &Array3<T>) -> (Vec<T>, Vec<T>) {
    let (c, h, w) = x.dim();
    let n = T::from_usize(h * w).unwrap();
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ch);
        let sum: T = plane.iter().copied().sum();
        let mean = sum / n;
        let var: T = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        means.push(mean);
        stds.push(var.max(T::zero()).sqrt());
    }
    (means, stds)
}

/// ChaCha RNG state persisted alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    dtype: String,
    param_count: usize,
    rng: RngState,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"WSDG";
const CHECKPOINT_VERSION: u32 = 1;

fn dtype_name<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Versioned container: magic, version, JSON header (config + dtype + RNG
/// state), then parameters as little-endian f64.
pub fn save_checkpoint<T: Scalar>(encoder: &Encoder<T>, rng: &RngState, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: encoder.config.clone(),
        dtype: dtype_name::<T>().to_string(),
        param_count: encoder.params.len(),
        rng: rng.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut buf: Vec<u8> = Vec::with_capacity(16 + header_bytes.len() + 8 * encoder.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    buf.write_u64::<LittleEndian>(header_bytes.len() as u64).unwrap();
    buf.extend_from_slice(&header_bytes);
    for &p in &encoder.params {
        buf.write_f64::<LittleEndian>(p.to_f64().unwrap()).unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Encoder<T>, RngState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = cursor.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = cursor.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    cursor
        .read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::json(path, e))?;
    if header.dtype != dtype_name::<T>() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            dtype_name::<T>()
        )));
    }

    let mut encoder = Encoder::<T>::new(&header.config, 0)?;
    if encoder.params.len() != header.param_count {
        return Err(Error::CheckpointMismatch(format!(
            "param count {} does not match architecture ({})",
            header.param_count,
            encoder.params.len()
        )));
    }
    for p in encoder.params.iter_mut() {
        let v = cursor.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        *p = T::from_f64_c(v);
    }
    Ok((encoder, header.rng))
}

/// Writer helper used by the trainer to fail fast on I/O problems.
pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
