//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A WSI has no non-tumor patches, so its BoVW vector is undefined.
    #[error("ungroupable WSI {wsi_id}: no non-tumor patches, BoVW vector undefined")]
    UngroupableWsi { wsi_id: String },

    /// A (WSI, class) prototype collapsed to the zero vector.
    #[error("degenerate prototype for WSI {wsi_id}, class {label}: member mean is the zero vector")]
    DegeneratePrototype { wsi_id: String, label: u8 },

    /// No cross-cluster WSI pair can be sampled.
    #[error("sampling infeasible: no eligible cross-cluster WSI pair (eligible WSIs per cluster: {populations:?})")]
    SamplingInfeasible { populations: Vec<(usize, usize)> },

    /// Training produced a non-finite loss; the offending batch was persisted.
    #[error("non-finite loss at step {step}; replay batch written to {replay_path}")]
    NonFiniteLoss { step: usize, replay_path: PathBuf },

    /// A checkpoint does not match the configuration it is used with.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// PNG encode/decode failure.
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Malformed JSON artifact.
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Malformed CSV artifact.
    #[error("csv error on {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
