//! Single-source domain generalization for patch-based WSI segmentation.
//!
//! The pipeline: generate synthetic slides with controllable appearance
//! shifts, tile them into single-class patches, discover pseudo-domains by
//! clustering bag-of-visual-words histograms of non-tumor style features,
//! then train an encoder with WSI-level and patch-level contrastive losses
//! on cross-cluster slide pairs, plus cross-entropy on a linear head.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32`/`f64`); concrete
//! aliases for the common instantiations are exported below.

pub mod bovw;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod img;
pub mod nn;
pub mod patch;
pub mod plot;
pub mod sampler;
pub mod scalar;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type the CLI pipeline runs in.
pub type PipelineScalar = f32;

pub type EncoderF32 = encoder::Encoder<f32>;
pub type EncoderF64 = encoder::Encoder<f64>;
pub type CodebookF32 = bovw::Codebook<f32>;
pub type CodebookF64 = bovw::Codebook<f64>;
pub type PrototypeSetF32 = contrastive::PrototypeSet<f32>;
pub type PrototypeSetF64 = contrastive::PrototypeSet<f64>;
