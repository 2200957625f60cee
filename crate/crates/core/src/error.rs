use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported endian flag {0}")]
    UnsupportedEndian(u8),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("dtype code out of range: {0}")]
    DtypeCode(u8),
    #[error("malformed metadata: {0}")]
    Metadata(String),
    #[error("invalid region {region_id}: {}", violations.join("; "))]
    InvalidRegion {
        region_id: String,
        violations: Vec<String>,
    },
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("unknown source {0:?}")]
    UnknownSource(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-divisible: {0}")]
    NonDivisible(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("no visible tokens")]
    NoVisibleTokens,
    #[error("no masked positions")]
    NoMaskedPositions,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("uncovered source {0:?}")]
    UncoveredSource(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
