use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the primitive's contract.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An input value is outside the mathematical domain of the primitive.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A computation produced a non-finite value.
    #[error("numerical error in {what}: {detail}")]
    Numeric { what: String, detail: String },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Requested generation parameters cannot be satisfied.
    #[error("infeasible spec: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub fn numeric(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { what: what.into(), detail: detail.into() }
    }
}
