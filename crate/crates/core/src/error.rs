//! Crate-wide error type.
//!
//! Variants are grouped by how callers are expected to react: bad
//! configuration or parameters (reject the request), malformed data or
//! layouts (reject the input), and numeric degeneracies (zero-norm vectors
//! and friends, which are surfaced loudly instead of silently skipped).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid static configuration: model dimensions, vocabulary
    /// partitions, corpus settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation parameter outside its documented range (interpolation
    /// strength, label token ids, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A sequence longer than the model can embed.
    #[error("sequence of length {required} exceeds the maximum of {max}")]
    SequenceTooLong { required: usize, max: usize },

    /// A token id outside the configured vocabulary.
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },

    /// A structurally invalid sequence layout (missing separator, position
    /// out of range, reserved token in content, ...).
    #[error("layout error: {0}")]
    Layout(String),

    /// An injection plan that does not fit the model or layout it is
    /// applied to.
    #[error("injection plan error: {0}")]
    Plan(String),

    /// A hook wrote to a position it did not declare.
    #[error("hook violation: {0}")]
    HookViolation(String),

    /// Demonstration retrieval could not be satisfied (empty candidate
    /// class, exhausted pool, missing embedding).
    #[error("retrieval error: {0}")]
    Retrieval(String),

    /// A zero-norm vector where a direction was required.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// Malformed input data (pool files, checkpoints, prediction files).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
