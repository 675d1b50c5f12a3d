use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the user-facing layers (I/O, configuration, training).
///
/// Misuse of the numeric core (shape mismatches, invalid op arguments) is a
/// programming error and panics instead, like the standard containers do.
#[derive(Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("training diverged: loss is not finite at iteration {iteration} (last finite loss {last_loss})")]
    NanLoss { iteration: usize, last_loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Pipeline(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, err: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
