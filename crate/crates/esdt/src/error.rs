//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EsdtError {
    /// Shape contract violation; the message names the offending extents.
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// Numeric contract violation (non-finite values, bad roots, bad steps).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid run configuration (unknown keys, unparsable values).
    #[error("config error: {0}")]
    Config(String),

    /// A verification suite or contract check failed.
    #[error("validation failure: {0}")]
    Validation(String),

    /// Checkpoint validation failure; names the offending field.
    #[error("checkpoint error in {field}: {detail}")]
    Checkpoint { field: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EsdtError {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn checkpoint(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Checkpoint {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EsdtError>;
