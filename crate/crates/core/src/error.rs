//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation precondition (dimension mismatch,
    /// out-of-range parameter, empty input where data is required, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input is structurally valid but numerically degenerate
    /// (e.g. a zero-norm vector fed to a cosine similarity).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An operation was called in the wrong order (e.g. backward before
    /// forward, novel training before the classifier was extended).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A text input could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A metric has no defined value on the given input (e.g. accuracy of
    /// an empty test set).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A novel stage was started but no participant holds any novel data.
    #[error("novel stage {stage} is empty: no participant holds filtered novel data")]
    EmptyNovelStage { stage: usize },

    /// Configuration rejected during validation; `path` is the offending
    /// field path (e.g. `federation.clients_per_round`).
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Filesystem failure carrying the path that was being accessed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a bad configuration rather than a
    /// runtime failure. The CLI maps these to a distinct exit code.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
