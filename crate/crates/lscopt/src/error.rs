use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A generation spec or problem configuration is unusable.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Instance text (TSPLIB or JSON) could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A solution does not satisfy the problem's structural invariants.
    #[error("invalid solution: {0}")]
    InvalidSolution(String),

    /// An action would break a problem constraint.
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    /// An operation was called out of sequence (e.g. stepping a finished episode).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Tensor shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Bad runtime configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An exact oracle was asked for an instance above its size bound.
    #[error("oracle bound exceeded: {0}")]
    OracleBound(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
