use std::path::PathBuf;

use gapcoref::{DataError, EncoderError, MetricsError, ModelError, TokenizerError, TrainError};
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::NonFinite(_) => EXIT_NUMERIC,
        ModelError::Encoder(EncoderError::InvalidConfig(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

impl CliError {
    /// 2 usage or config, 3 data or coverage, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Encoder(EncoderError::InvalidConfig(_)) => EXIT_USAGE,
            CliError::Model(m) => model_code(m),
            CliError::Train(t) => match t {
                TrainError::InvalidConfig(_) => EXIT_USAGE,
                TrainError::Diverged(_) => EXIT_NUMERIC,
                TrainError::Model(m) => model_code(m),
                TrainError::Encoder(EncoderError::InvalidConfig(_)) => EXIT_USAGE,
                _ => EXIT_DATA,
            },
            _ => EXIT_DATA,
        }
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
