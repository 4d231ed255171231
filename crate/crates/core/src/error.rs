use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Container decoding errors are split finely so callers (and the fuzz
/// tests) can tell a truncated file from a corrupted one.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {rows}x{cols}")]
    InvalidShape { rows: usize, cols: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid value at index {index}: {value}")]
    InvalidValue { index: usize, value: f32 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("scheme error: {0}")]
    Scheme(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("bad magic {found:02x?}, expected {expected:02x?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported version {0}")]
    VersionMismatch(u32),

    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error(
        "checksum mismatch for tensor {name:?}: stored {stored:#010x}, computed {computed:#010x}"
    )]
    Checksum {
        name: String,
        stored: u32,
        computed: u32,
    },

    #[error("resource exhausted: {0}")]
    Resource(String),

    #[error("math error: {0}")]
    Math(String),

    /// A benchmark cell failed twice; `partial` holds the records measured
    /// before the failure. They are not valid as a summary.
    #[error("benchmark aborted: {reason}")]
    Aborted {
        reason: String,
        partial: Vec<crate::bench::BenchRecord>,
    },

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
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
