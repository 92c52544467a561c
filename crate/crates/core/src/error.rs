use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied values outside the accepted domain.
    #[error("input error: {0}")]
    Input(String),

    /// An operation was called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value in layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    #[error("non-finite gradient passed to {0}")]
    NonFiniteGradient(&'static str),

    #[error("training diverged at epoch {epoch}, iteration {iteration} (loss = {loss})")]
    Diverged {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error(
        "no (lambda, cutoff) pair selected exactly {k} features within {steps} training runs; \
         closest counts: {closest:?}"
    )]
    SearchExhausted {
        k: usize,
        steps: usize,
        /// (lambda, min achievable count, max achievable count) per step.
        closest: Vec<(f64, usize, usize)>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: u64,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
