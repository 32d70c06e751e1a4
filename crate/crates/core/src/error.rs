use thiserror::Error;

/// Crate-wide error type. Variants map to the failure classes the library
/// distinguishes: shape/dimension mismatches, violated call contracts,
/// out-of-domain arguments, numeric blow-ups, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum BootError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BootError>;

impl BootError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        BootError::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        BootError::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        BootError::Domain(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        BootError::Numeric(msg.into())
    }
}
