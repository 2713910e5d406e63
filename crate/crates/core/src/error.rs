//! Crate-wide error type.
//!
//! Variants are grouped by failure class so callers (notably the CLI) can
//! map them to distinct exit statuses: configuration problems, I/O and file
//! format problems, and numeric contract violations.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported PGM magic {found:?} (expected \"P2\" or \"P5\")")]
    PgmMagic { found: String },

    #[error("malformed PGM header: {reason}")]
    PgmHeader { reason: String },

    #[error("PGM maxval {maxval} out of range (must be 1..=65535)")]
    PgmMaxval { maxval: u64 },

    #[error("truncated PGM payload: expected {expected} samples, found {found}")]
    PgmTruncated { expected: usize, found: usize },

    #[error("invalid image: {reason}")]
    InvalidImage { reason: String },

    #[error("mask values must be 0 or 1 (found {value})")]
    MaskNotBinary { value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("image {width}x{height} smaller than {kernel}x{kernel} kernel")]
    ImageSmallerThanKernel {
        width: usize,
        height: usize,
        kernel: usize,
    },

    #[error("mask marks every pixel as target; no background to separate")]
    AllTargetMask,

    #[error("empty batch")]
    EmptyBatch,

    #[error("tensor shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place {targets} non-overlapping targets after {attempts} attempts")]
    TargetPlacement { targets: usize, attempts: usize },

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("numeric contract violation: {0}")]
    NumericContract(String),

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
