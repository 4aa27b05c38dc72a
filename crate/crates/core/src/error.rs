use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A persisted artifact had the wrong magic, version, or layout.
    #[error("file format: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// Subject-pool generation exhausted its resampling budget.
    #[error("generation failed: {0}")]
    Generation(String),
    /// A privacy guarantee was requested from a mechanism that adds no noise.
    #[error("noise required: {0}")]
    NoiseRequired(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
