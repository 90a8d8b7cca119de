use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("covariance of class {class} is not positive definite after regularization")]
    Regularization { class: usize },

    #[error("classes absent from the latent statistics: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("class {class} has {count} samples, at least 2 are required")]
    InsufficientSamples { class: usize, count: usize },

    #[error("label {label} is not covered by the prior bank ({classes} classes)")]
    UnknownLabel { label: usize, classes: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("batch holds fewer than two classes with a positive pair; use class-balanced sampling so every batch has at least two classes and one class with two samples")]
    SingleClassBatch,

    #[error("mixture is degenerate: {0}")]
    DegenerateMixture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset {dataset}: {message}")]
    Dataset { dataset: String, message: String },

    #[error("checksum mismatch for {path}: expected sha256 {expected}, found {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("loss diverged at epoch {epoch}, batch {batch}: {value}")]
    Divergence { epoch: usize, batch: usize, value: f64 },

    #[error("csv schema: missing column `{0}`")]
    Schema(String),

    #[error("download failed for {url}: {message}")]
    Network { url: String, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short machine-readable tag, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Regularization { .. } => "regularization",
            Error::MissingClasses(_) => "missing_classes",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::Empty(_) => "empty",
            Error::SingleClassBatch => "single_class_batch",
            Error::DegenerateMixture(_) => "degenerate_mixture",
            Error::Config(_) => "config",
            Error::Dataset { .. } => "dataset",
            Error::Checksum { .. } => "checksum",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Schema(_) => "schema",
            Error::Network { .. } => "network",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn ensure_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
