use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code categories:
/// `Shape`/`Config`/`Data`/`Io` are validation failures, `Numeric` covers
/// non-finite losses and failed gradient checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
