use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StfError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("unknown elementwise op kind `{0}`")]
    UnknownOpKind(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("degenerate sequence: {0}")]
    DegenerateSequence(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("truncated skeleton file at frame {frame}: {message}")]
    Truncated { frame: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("loss invariant violated: {0}")]
    LossInvariant(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StfError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        StfError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StfError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        StfError::Parse {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }
}
