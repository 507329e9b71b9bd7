//! Crate-wide error type. Shape and programming-contract violations panic at
//! the call site instead; this enum covers conditions a caller can hit with
//! well-formed code: bad files, bad configs, and numerically failed runs.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path} line {line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },

    #[error("{path}: {reason}")]
    Pnm { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(
        "checkpoint {path} does not match the configured model \
         (missing: {missing:?}; unexpected: {unexpected:?})"
    )]
    CheckpointMismatch { path: PathBuf, missing: Vec<String>, unexpected: Vec<String> },

    #[error("non-finite value produced by op `{op}` at step {step}")]
    NonFinite { op: String, step: u64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
