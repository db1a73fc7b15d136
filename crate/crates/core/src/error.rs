use thiserror::Error;

use crate::solver::PotentialField;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("node sets belong to different meshes")]
    MeshMismatch,

    /// `E` is not contained in `F`; downstream this is reported as infinite capacity.
    #[error("incompatible pair: {0}")]
    Incompatible(String),

    #[error("solver diverged after {iterations} iterations (best residual {best_residual:e})")]
    Diverged {
        iterations: usize,
        best_residual: f64,
        best: Box<PotentialField>,
        history: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
