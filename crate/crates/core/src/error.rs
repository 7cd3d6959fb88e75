use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("state enumeration refused: {count} candidate states exceed the limit of {limit}")]
    EnumerationTooLarge { count: usize, limit: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("stale cache: parameters changed since the forward pass (cache generation {cache}, network generation {network})")]
    StaleCache { cache: u64, network: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint version mismatch: expected `{expected}`, found `{found}`")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointMalformed(String),

    #[error("action set mismatch: checkpoint has {source_actions:?}, task expects {target_actions:?}")]
    ActionSetMismatch {
        source_actions: Vec<String>,
        target_actions: Vec<String>,
    },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("run aborted: {0}")]
    RunAborted(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
