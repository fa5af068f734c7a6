use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point at depth {depth} lies behind or on the image plane")]
    NonPositiveDepth { depth: f64 },

    #[error("no map point survives projection into the image")]
    EmptyProjection,

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("no consensus: best hypothesis has {inliers} inliers, {required} required")]
    NoConsensus { inliers: usize, required: usize },

    #[error("initial error of sample {index} is zero")]
    ZeroInitialError { index: usize },

    #[error("malformed scan {path}: {len} bytes is not a multiple of 16")]
    MalformedScan { path: PathBuf, len: u64 },

    #[error("scan {scan}: {labels} labels for {points} points")]
    LabelLengthMismatch {
        scan: usize,
        points: usize,
        labels: usize,
    },

    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    #[error("cannot parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedScan { .. }
                | Error::LabelLengthMismatch { .. }
                | Error::Invalid { .. }
                | Error::Parse { .. }
                | Error::Io(_)
                | Error::DimensionMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
