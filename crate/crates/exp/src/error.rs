use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error(transparent)]
    Core(#[from] npbml_core::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("config does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config does not serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

pub type Result<T, E = ExpError> = std::result::Result<T, E>;

/// Broad failure class, also used as the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Internal = 1,
    Config = 2,
    Io = 3,
    Numerical = 4,
    Check = 5,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Config => "config",
            Category::Io => "io",
            Category::Numerical => "numerical",
            Category::Check => "check",
        }
    }
}

impl ExpError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ExpError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExpError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        use npbml_core::Error as E;
        match self {
            ExpError::Config { .. } | ExpError::Parse(_) => Category::Config,
            ExpError::Io { .. } | ExpError::Csv(_) | ExpError::Json(_) => Category::Io,
            ExpError::Serialize(_) => Category::Internal,
            ExpError::ChecksFailed(_) => Category::Check,
            ExpError::Core(e) => match e {
                E::Config { .. } | E::Spec(_) | E::SplitMismatch(_) | E::Task(_) | E::FilmExtent { .. } => Category::Config,
                E::Io(_) | E::Json(_) | E::Checkpoint(_) => Category::Io,
                E::Diverged { .. } | E::AllDiverged => Category::Numerical,
                _ => Category::Internal,
            },
        }
    }
}
