use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("logical form parse error at offset {offset}: {message}")]
    LogicalForm { offset: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: String,
        line: usize,
        message: String,
    },

    #[error("illegal action `{action}` in state [{state}]")]
    IllegalAction { action: String, state: String },

    #[error("illegal action at step {index}: {source}")]
    IllegalStep {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("incomplete parse after {actions} actions")]
    Incomplete { actions: usize },

    #[error("leaf `{0}` is neither in the terminal vocabulary nor copyable from the sentence")]
    Uncopyable(String),

    #[error("non-terminal `{0}` has no children; empty non-terminals cannot be built by the transition system")]
    EmptyNonTerminal(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
