use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pixel ({u:.3}, {v:.3}) lies {theta:.4} rad off-axis, beyond the field of view")]
    OutsideFov { u: f64, v: f64, theta: f64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("hash mismatch ({what}): expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("degenerate prediction in sample {sample}: {reason}")]
    Degenerate { sample: usize, reason: String },

    #[error("non-finite loss at step {step} (stage {stage})")]
    NonFiniteLoss { stage: u8, step: u64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown joint name `{0}`")]
    UnknownJoint(String),

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt { path: path.into(), reason: reason.into() }
    }

    /// Stable machine-readable kind, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::OutsideFov { .. } => "outside_fov",
            Error::Io { .. } => "io",
            Error::Corrupt { .. } => "corrupt",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Degenerate { .. } => "degenerate",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::EmptyBatch => "empty_batch",
            Error::UnknownJoint(_) => "unknown_joint",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::Json { .. } => "json",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
