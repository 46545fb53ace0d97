use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid use: {0}")]
    InvalidUse(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("missing model: {0}")]
    MissingModel(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 for validation failures, 2 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidShape(_)
            | Error::InvalidConfig(_)
            | Error::InvalidUse(_)
            | Error::InvalidLabel(_)
            | Error::InvalidInput(_)
            | Error::DegenerateData(_)
            | Error::UndefinedMetric(_)
            | Error::MissingModel(_)
            | Error::Parse(_) => 1,
            Error::Load(_) | Error::Training(_) | Error::Io(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
