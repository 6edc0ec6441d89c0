use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite {what} in `{param}`")]
    Divergence {
        epoch: usize,
        batch: usize,
        what: &'static str,
        param: String,
    },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("kappa undefined: expected agreement equals 1")]
    UndefinedKappa,

    #[error("hash mismatch: expected {expected:016x}, found {found:016x}")]
    HashMismatch { expected: u64, found: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for failures caused by numerics rather than inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::UndefinedKappa)
    }
}
