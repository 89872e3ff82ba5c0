use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("data length mismatch in {path}: expected {expected} values, found {found}")]
    DataLength {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("empty list: {0}")]
    EmptyList(&'static str),

    #[error("list is not sorted: {0}")]
    NotSorted(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("patch size must be odd, got {0}")]
    EvenPatchSize(usize),

    #[error("class {0} has no patches")]
    EmptyClass(u8),

    #[error("degenerate normalization statistics: {0}")]
    DegenerateStats(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model fingerprint mismatch: expected `{expected}`, found `{found}`")]
    FingerprintMismatch { expected: String, found: String },

    #[error("unsupported model file version in {0}")]
    BadVersion(PathBuf),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn header(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedHeader {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
