use std::path::PathBuf;

use thiserror::Error;

use crate::geodata::Point;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tile centered at ({:.2}, {:.2}) is outside raster coverage", center.e, center.n)]
    OutOfCoverage { center: Point },

    #[error("non-finite value in {layer}")]
    Numeric { layer: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("representation collapse: {0}")]
    Collapse(String),

    #[error("missing prerequisite for `{stage}`: run `{requires}` first ({detail})")]
    MissingPrerequisite {
        stage: String,
        requires: String,
        detail: String,
    },

    #[error("missing ground truth for queries: {0:?}")]
    MissingGroundTruth(Vec<String>),

    #[error("workdir {0} is locked by another stage")]
    Locked(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
