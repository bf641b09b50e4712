use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schedule conflict: class {class} appears in steps {first} and {second}")]
    ScheduleConflict {
        class: u32,
        first: usize,
        second: usize,
    },
    #[error("single-class incremental learning is unsupported ({0}); image-level training needs negatives")]
    UnsupportedSingleClass(String),
    #[error("step index {index} out of range (schedule has {len} steps)")]
    StepOutOfRange { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NumericInput(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty target class set")]
    EmptyTarget,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("supervision error: {0}")]
    Supervision(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }
}
