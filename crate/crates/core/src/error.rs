use thiserror::Error;

use crate::evaluation::StatsError;
use crate::inference::InferenceError;
use crate::nn3d::NnError;
use crate::phantom::PhantomError;
use crate::scheduler::ScheduleError;
use crate::tiling::TilingError;
use crate::volume::avol::AvolError;
use crate::volume::VolumeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Avol(#[from] AvolError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing weights: {0}")]
    MissingWeights(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True when the failure is numerical (non-finite loss or gradients) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Nn(e) => e.is_numerical(),
            Error::Schedule(e) => e.is_numerical(),
            _ => false,
        }
    }
}
