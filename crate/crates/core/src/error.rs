use thiserror::Error;

/// Errors surfaced by the compression library.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An index (token id, target id, layer) out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// A position exceeds the model's positional capacity.
    #[error("position out of range: {0}")]
    Range(String),
    /// Inconsistent or invalid configuration.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Sequence plus prefix exceeds what the model can hold.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    /// Operation issued against an object in the wrong state.
    #[error("invalid state: {0}")]
    State(String),
    /// A caller-facing contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input data failed validation.
    #[error("data validation failed: {0}")]
    DataValidation(String),
    /// A non-finite value (NaN/Inf) appeared where finite math is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Malformed serialized artifact.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
