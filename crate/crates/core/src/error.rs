use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the view-transformation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("camera `{camera}`: field `{field}`: {reason}")]
    InvalidCamera {
        camera: String,
        field: &'static str,
        reason: String,
    },
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("invalid depth bins: {0}")]
    InvalidBins(String),
    #[error("invalid BEV spec: {0}")]
    InvalidBevSpec(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Stable machine-readable code, used by the CLI diagnostic line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidCamera { .. } => "invalid-camera",
            Error::InvalidRig(_) => "invalid-rig",
            Error::InvalidBins(_) => "invalid-bins",
            Error::InvalidBevSpec(_) => "invalid-bev",
            Error::InvalidDistribution(_) => "invalid-distribution",
            Error::InvalidParams(_) => "invalid-params",
            Error::NonPositiveDepth(_) => "non-positive-depth",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
