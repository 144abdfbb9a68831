use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported matrix file version {version} (dtype {dtype})")]
    UnsupportedVersion { version: u16, dtype: u8 },

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("label {label} at index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("dataset already carries a corruption record or diverging ground truth")]
    AlreadyCorrupted,

    #[error("distillation loss requires given-model logits")]
    MissingGivenLogits,

    #[error("dataset has no ground-truth labels")]
    MissingGroundTruth,

    #[error("line search stalled at iteration {iteration} (grad inf-norm {grad_inf_norm:e})")]
    LineSearchStall { iteration: usize, grad_inf_norm: f64 },

    #[error("stale weights: gradient inf-norm {grad_inf_norm:e} exceeds tolerance {grad_tol:e}")]
    Staleness { grad_inf_norm: f64, grad_tol: f64 },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("conjugate gradient did not converge in {iterations} iterations (rel residual {residual:e})")]
    CgNoConvergence { iterations: usize, residual: f64 },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
