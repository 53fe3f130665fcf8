use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// Variants mirror the failure classes of the individual stages so callers
/// (and the CLI exit-code mapping) can tell validation problems apart from
/// runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unknown item reference '{item_id}' (user '{user_id}')")]
    Reference { item_id: String, user_id: String },
    #[error("cannot split sequence of user '{user_id}': {msg}")]
    Split { user_id: String, msg: String },
    #[error("embedding file format error: {0}")]
    Format(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("similarity replacement needs at least two items, got {0}")]
    NoNeighbor(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("config error for key '{key}': {msg}")]
    Config { key: String, msg: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("training diverged in {stage} at epoch {epoch}: {msg}")]
    Training {
        stage: &'static str,
        epoch: usize,
        msg: String,
    },
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by bad user input (files, flags, config)
    /// rather than by a computation going wrong.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Training { .. } | Error::Evaluation(_) => false,
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
