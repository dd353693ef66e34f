//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcqError {
    /// Tensor or layer geometry is inconsistent.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Construction-time validation failed (bad dims, bad policy, bad range).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A NaN or infinity appeared where the engine guarantees finite values.
    #[error("non-finite value in layer {layer} ({context})")]
    NonFinite { layer: usize, context: String },

    /// An operation was called out of sequence (e.g. backward without forward).
    #[error("invalid state: {0}")]
    State(String),

    /// Training diverged; the step index is the first step with a NaN loss.
    #[error("training diverged at step {step} (section {section})")]
    Diverged { section: usize, step: usize },

    /// An input collection was empty where at least one element is required.
    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not match the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DcqError>;
