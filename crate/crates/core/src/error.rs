use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::cache::CacheKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated index in {path}")]
    TruncatedIndex { path: PathBuf },

    #[error("truncated payload in {path}: need {needed} bytes, file has {actual}")]
    TruncatedPayload {
        path: PathBuf,
        needed: u64,
        actual: u64,
    },

    #[error("corrupt index in {path}: {reason}")]
    CorruptIndex { path: PathBuf, reason: String },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("entries not sorted by key at {0}")]
    Unsorted(CacheKey),

    #[error("duplicate key {0}")]
    DuplicateKey(CacheKey),

    #[error("entry not found: {0}")]
    EntryNotFound(CacheKey),

    #[error("inconsistent key sets; missing: {}", format_keys(.missing))]
    InconsistentKeys { missing: Vec<CacheKey> },

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

fn format_keys(keys: &[CacheKey]) -> String {
    keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput => "empty_input",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::TruncatedIndex { .. } => "truncated_index",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::CorruptIndex { .. } => "corrupt_index",
            Error::Malformed { .. } => "malformed",
            Error::Unsorted(_) => "unsorted",
            Error::DuplicateKey(_) => "duplicate_key",
            Error::EntryNotFound(_) => "entry_not_found",
            Error::InconsistentKeys { .. } => "inconsistent_keys",
            Error::NonFinite(_) => "non_finite",
        }
    }
}
