use thiserror::Error;

use crate::annotator::AnnotatorError;
use crate::baselines::BaselineError;
use crate::dataset::DatasetError;
use crate::env::EnvError;
use crate::eval::EvalError;
use crate::iql::{ArtifactError, IqlError};

/// Top-level error. Each variant maps onto a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Iql(#[from] IqlError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Validation(String),
    /// Some trajectories could not be labeled; the rest were saved.
    #[error("{failed} of {total} trajectories failed to label")]
    LabelingFailed { failed: usize, total: usize, backend: bool },
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    /// 0 success, 1 validation, 2 backend or response parsing, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Annotator(e) if e.is_backend() => 2,
            Error::LabelingFailed { backend: true, .. } => 2,
            Error::Iql(IqlError::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
