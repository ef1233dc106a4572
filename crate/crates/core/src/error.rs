use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the tracking library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no joints present")]
    NoJoints,
    #[error("chest underdetermined: missing {0}")]
    ChestUnderdetermined(&'static str),
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("uncalibrated node `{0}`")]
    UncalibratedNode(String),
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("confidence underflow: {0}")]
    ConfidenceUnderflow(f64),
    #[error("degenerate link: child coincides with parent")]
    DegenerateLink,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("no temporal overlap between estimates and ground truth")]
    NoOverlap,
    #[error("ambiguous correspondence for track {track}: subjects {candidates:?} are equally near")]
    AmbiguousCorrespondence { track: u64, candidates: Vec<u64> },
    #[error("mismatched subject counts: {0}")]
    SubjectMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
