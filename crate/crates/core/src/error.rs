use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row} has no unmasked position")]
    EmptyRow { row: usize },

    #[error("attention pattern: {0}")]
    Pattern(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Corpus {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("non-finite loss {loss} at step {step} (batch pairs {batch:?})")]
    NonFinite {
        step: u64,
        batch: Vec<usize>,
        loss: f32,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-parseable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::EmptyRow { .. } => "empty-row",
            Error::Pattern(_) => "pattern",
            Error::Graph(_) => "autodiff",
            Error::Io { .. } => "io",
            Error::Corpus { .. } => "corpus",
            Error::Checkpoint { .. } => "checkpoint",
            Error::NonFinite { .. } => "non-finite",
            Error::Config { .. } => "config",
        }
    }
}
