use npbml_ad::AdError;
use thiserror::Error;

use crate::tasks::Split;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("invalid encoder spec: {0}")]
    Spec(String),
    #[error("missing meta-parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("film: generator expects extent {expected}, activation has {got}")]
    FilmExtent { expected: usize, got: usize },
    #[error("inner loop diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("every episode of the meta-batch diverged")]
    AllDiverged,
    #[error("no episodes given")]
    NoEpisodes,
    #[error("task: {0}")]
    Task(String),
    #[error("evaluation must not use the {0} split")]
    SplitMismatch(Split),
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
