use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("{path}: line {line}: {message}")]
    Format { path: PathBuf, line: u64, message: String },

    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("no embedding for instance `{0}`")]
    MissingEmbedding(String),

    #[error("class `{class}` has {available} items, {required} required")]
    InsufficientClass {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("cache holds no usable entries")]
    EmptyCache,

    #[error("empty neighborhood")]
    EmptyNeighborhood,

    #[error("empty training set")]
    EmptyTraining,

    #[error("teacher unavailable: {0}")]
    TeacherUnavailable(String),

    #[error("teacher reply is not a label: {raw_text:?}")]
    TeacherProtocol { raw_text: String },

    #[error("oracle teacher needs a gold label for `{0}`")]
    OracleNeedsGold(String),

    #[error("no fixture for `{id}` (prompt hash {prompt_hash})")]
    FixtureMiss { id: String, prompt_hash: String },

    #[error("instance `{0}` has no gold label")]
    MissingGold(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("trace shape mismatch: {0}")]
    TraceShape(String),

    #[error("instance `{id}`: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration: {0}")]
    Config(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: u64, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            line,
            message: message.to_string(),
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors that describe bad input or configuration rather than a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::DegenerateVector(_)
                | Error::UnknownLabel(_)
                | Error::InvalidLabelSpace(_)
                | Error::Format { .. }
                | Error::Schema { .. }
                | Error::MissingEmbedding(_)
                | Error::InsufficientClass { .. }
                | Error::Config(_)
                | Error::Json(_)
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
            || matches!(self, Error::Instance { source, .. } if source.is_validation())
    }
}
