use std::path::PathBuf;

use thiserror::Error;

use crate::pipeline::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad or missing configuration: weights files, layer indices, backend URLs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shapes, schedules, store keys).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or other numerical failure inside a model pass.
    #[error("computation error: {0}")]
    Computation(String),

    /// Invalid user input (options, image payloads, review rows).
    #[error("validation error: {0}")]
    Validation(String),

    /// Transport failure talking to a remote backend. `retryable` marks timeouts
    /// and connection failures.
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },

    /// A generative backend answered but produced nothing usable.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("job cancelled")]
    Cancelled,

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the pipeline stage it came from, unless it is
    /// already tagged or is a cancellation.
    pub fn in_stage(self, stage: Stage) -> Self {
        match self {
            Error::Stage { .. } | Error::Cancelled => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, with stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(
            self.root(),
            Error::Transport {
                retryable: true,
                ..
            }
        )
    }
}
