use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = InsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum InsError {
    /// Inconsistent or invalid configuration (style counts, layer keys, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A call received arguments outside its domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed scene, image or mask data.
    #[error("data error: {0}")]
    Data(String),

    /// A required file (weights, checkpoint) could not be loaded.
    #[error("load error: {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// Parameters or checkpoint contents are unusable.
    #[error("corrupted checkpoint: {0}")]
    Corrupted(String),

    #[error("degenerate gradient: |grad f| = {0:e} at the query point")]
    DegenerateGradient(f64),

    #[error("grazing ray: |grad f . v| = {0:e}")]
    GrazingRay(f64),

    /// Training produced a non-finite loss term.
    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl InsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        InsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            InsError::Config(_) => "config",
            InsError::Argument(_) => "argument",
            InsError::Data(_) => "data",
            InsError::Load { .. } => "load",
            InsError::Corrupted(_) => "corrupted",
            InsError::DegenerateGradient(_) => "degenerate_gradient",
            InsError::GrazingRay(_) => "grazing_ray",
            InsError::NonFinite { .. } => "non_finite",
            InsError::Io { .. } => "io",
        }
    }
}
