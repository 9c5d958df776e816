//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (bad magic, truncated payload, ...).
    #[error("format error in {path} at byte {offset}: {what}")]
    Format {
        path: String,
        offset: u64,
        what: String,
    },

    /// Invalid argument or shape mismatch at an API boundary.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A class does not have enough samples for the requested operation.
    #[error("class {class} has only {available} samples, {needed} needed")]
    InsufficientData {
        class: usize,
        available: usize,
        needed: usize,
    },

    /// Loss or gradient became non-finite.
    #[error("numerical failure at step {step}: {what}")]
    NumericalFailure { step: usize, what: String },

    /// Linear solve failed.
    #[error("solver error: {0}")]
    Solver(String),

    /// A referenced artifact (trajectory store, synthetic dataset, ...) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Invalid or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Batch sampling could not satisfy a per-class requirement.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Teacher trajectory start and target coincide.
    #[error("degenerate trajectory: teacher did not move over the matching window")]
    DegenerateTrajectory,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
