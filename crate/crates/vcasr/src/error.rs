use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value or inconsistent settings. CLI maps this to exit code 1.
    #[error("configuration: {0}")]
    Config(String),
    /// Bad caller-supplied data (empty input, unknown id, ...). CLI maps this to exit code 1.
    #[error("input: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Non-finite values or other numeric breakdown during training/decoding.
    #[error("numeric: {0}")]
    Numeric(String),
    /// Malformed file contents (bad magic, truncated tensor, ...).
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether this is a usage/configuration problem (exit 1) as opposed to a
    /// runtime failure (exit 2).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
