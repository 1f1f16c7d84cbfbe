use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its valid range.
    #[error("invalid config: {0}")]
    Config(String),
    /// An input (logits, sequence, dataset record) violates its contract.
    #[error("invalid input: {0}")]
    Input(String),
    /// A training routine was handed no data.
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    /// A model required by a method is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    /// An internal invariant did not hold (e.g. a forward-pass count mismatch).
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// A sampler could not produce what was asked of it.
    #[error("sampler failure: {0}")]
    Sampler(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
