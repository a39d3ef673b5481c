//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the surface-forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A tape/graph misuse, e.g. backward from a var of another tape.
    #[error("graph error: {0}")]
    Graph(String),

    /// Input data is structurally valid but numerically unusable.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An operation received an empty collection.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Not enough history to seed the conditioning features.
    #[error("insufficient history: date index {index} has {have} prior observations, need {needed}")]
    WarmUp {
        index: usize,
        have: usize,
        needed: usize,
    },

    /// A collection is too small for the requested operation.
    #[error("size error: {0}")]
    Size(String),

    /// Truth and sample dates do not line up.
    #[error("date alignment error: {0}")]
    Alignment(String),

    /// A non-finite value appeared during training or sampling.
    #[error("divergence: {0}")]
    Divergence(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration file or option values.
    #[error("config error: {0}")]
    Config(String),

    /// Bad user-supplied input (CLI arguments, input files).
    #[error("invalid input: {0}")]
    Validation(String),

    /// Failure reading a user-supplied file.
    #[error("cannot read {path}: {source}")]
    ReadInput {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for input/validation problems,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::ReadInput { .. }
            | Error::Alignment(_)
            | Error::WarmUp { .. }
            | Error::Size(_)
            | Error::EmptyInput(_)
            | Error::DegenerateInput(_)
            | Error::Csv(_) => 2,
            _ => 1,
        }
    }
}
