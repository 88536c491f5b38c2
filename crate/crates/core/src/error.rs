use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f32,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::State(_) => 2,
            Error::Shape(_) | Error::Format(_) | Error::Data(_) | Error::Io(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        if err.is_io_error() {
            match err.into_kind() {
                csv::ErrorKind::Io(e) => Error::Io(e),
                _ => unreachable!(),
            }
        } else {
            Error::Format(err.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
