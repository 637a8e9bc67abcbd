//! Error type shared across the engine.

use thiserror::Error;

/// Errors produced by engine operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A token id was looked up in a table that does not cover it.
    #[error("token id {id} at position {position} is out of vocabulary (table size {vocab_size})")]
    OutOfVocabulary {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    /// An operation that requires a non-empty input received an empty one.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Summed embedding was the zero vector, so no unit key exists.
    #[error("degenerate key: embedding sum has zero norm")]
    DegenerateKey,

    /// A memory ordinal was inserted twice.
    #[error("duplicate memory ordinal t={0}")]
    DuplicateOrdinal(u64),

    /// Per-token weights did not match the target length.
    #[error("length mismatch: {what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A text file failed to parse.
    #[error("parse error at {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    /// The oracle transport failed after exhausting retries. The rendered
    /// prompt is carried so the request can be replayed offline.
    #[error("oracle transport failed after {attempts} attempts: {message}")]
    Transport {
        attempts: u32,
        message: String,
        prompt: String,
    },

    /// The oracle endpoint answered with something we cannot interpret.
    #[error("oracle protocol error: {0}")]
    Protocol(String),

    /// Operation not supported by this solver backend.
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
