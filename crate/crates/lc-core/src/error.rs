use thiserror::Error;

/// Errors surfaced by the engine.
///
/// `Config`, `Shape`, `State`, `Format`, `Version` and `Metric` indicate bad
/// inputs or files and map to CLI exit code 1. `Invariant` means an internal
/// contract was violated (a routing or bookkeeping bug) and maps to exit
/// code 2.
#[derive(Debug, Error)]
pub enum LcError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("internal invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LcError>;

impl LcError {
    pub fn config(msg: impl Into<String>) -> Self {
        LcError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        LcError::Shape(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        LcError::Invariant(msg.into())
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            LcError::Invariant(_) => 2,
            _ => 1,
        }
    }
}
