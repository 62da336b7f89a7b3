use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("preprocessing step `{step}` failed: {message}")]
    Pipeline { step: &'static str, message: String },
    #[error("NIfTI error for {path}: {message}")]
    Nifti { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] volseg_nn::NnError),
}

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use volseg_nn::NnError;
        match self {
            Error::Config(_) | Error::Capability(_) | Error::InvalidArgument(_) => 2,
            Error::Numeric(_) => 4,
            Error::Nn(NnError::NonFinite(_)) => 4,
            Error::Nn(NnError::Config(_) | NnError::Capability(_)) => 2,
            _ => 3,
        }
    }
}
