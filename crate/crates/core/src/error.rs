use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient tape: {0}")]
    Tape(String),
    #[error("operation not allowed in training mode: {0}")]
    TrainingMode(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("solver diverged: {0}")]
    Diverged(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, DriftError>;

impl From<serde_json::Error> for DriftError {
    fn from(e: serde_json::Error) -> Self {
        DriftError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for DriftError {
    fn from(e: toml::de::Error) -> Self {
        DriftError::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for DriftError {
    fn from(e: toml::ser::Error) -> Self {
        DriftError::Serde(e.to_string())
    }
}
