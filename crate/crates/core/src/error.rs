use std::path::PathBuf;

use crate::thundernet::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dimension mismatch: {0}")]
    Dimensions(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:.6e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds {tolerance:.1e}")]
    GradCheck { max_rel_err: f64, tolerance: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numeric failures (diverged training, failed gradient checks) as opposed
    /// to bad input data or arguments.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::GradCheck { .. }
        )
    }
}
