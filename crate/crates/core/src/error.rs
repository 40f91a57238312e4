use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate word `{0}`")]
    DuplicateWord(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("stale synonym dictionary: built from {expected}, supplied file has digest {found}")]
    StaleDictionary { expected: String, found: String },

    #[error("index {index} out of range for size {size}")]
    OutOfRange { index: usize, size: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("non-finite loss in epoch {epoch}, batch {batch}: ce={ce}, metric={metric}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        ce: f64,
        metric: f64,
    },

    #[error("infeasible generator spec: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
