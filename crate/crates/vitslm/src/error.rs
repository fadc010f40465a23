use thiserror::Error;

/// Crate-wide error type. Variants separate contract violations
/// (dimensions, configuration, file formats, measurement preconditions)
/// from runtime failures (numeric blowups, data generation, I/O).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data generation failed: {0}")]
    DataGen(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code convention: 0 success, 2 config/usage error,
    /// 3 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Config(_) | Error::Format(_) | Error::Measurement(_) => 2,
            Error::Numeric(_) | Error::DataGen(_) | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}
