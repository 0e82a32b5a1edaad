//! Error taxonomy shared across the crate.
//!
//! Every error carries a stable machine-readable class (used by the CLI for
//! exit codes and structured stderr output) plus a human-readable message.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape disagreement between tensors / configured sizes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed argument values (non-finite inputs, out-of-range knobs)
    /// detected before any state is mutated.
    #[error("invalid input: {0}")]
    Input(String),

    /// A trace or gradient produced under an older model version was passed
    /// to an operation that requires the current version.
    #[error("stale model version: {0}")]
    Stale(String),

    /// Numerical failure (non-finite gradient, Cholesky breakdown, ...).
    #[error("numerics: {0}")]
    Numerics(String),

    /// Loss kind incompatible with the model head or target type.
    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    /// An id was inserted twice into a structure that requires uniqueness.
    #[error("duplicate id: {0}")]
    Duplicate(String),

    /// A zero-norm vector where a direction is required.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// A statistic was requested before any observations were recorded.
    #[error("cold start: {0}")]
    ColdStart(String),

    /// Invalid run configuration (caught before any work starts).
    #[error("config: {0}")]
    Config(String),

    /// Dataset file does not match the expected schema.
    #[error("schema: {0}")]
    Schema(String),

    /// Dataset-level problems beyond schema (empty pool, bad labels, ...).
    #[error("data: {0}")]
    Data(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable class identifier for structured error reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::Stale(_) => "stale",
            Error::Numerics(_) => "numerics",
            Error::UnsupportedLoss(_) => "unsupported_loss",
            Error::Duplicate(_) => "duplicate",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::ColdStart(_) => "cold_start",
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Schema(_) | Error::Data(_) => 3,
            Error::Numerics(_) => 4,
            Error::Io(_) | Error::Json(_) => 5,
            _ => 1,
        }
    }
}
