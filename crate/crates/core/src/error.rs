use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `detail` names the offending axes.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: String, detail: String },

    #[error("{context}: malformed data: {detail}")]
    Format { context: String, detail: String },

    #[error("checkpoint config hash mismatch: file has {found:016x}, expected {expected:016x}")]
    ConfigHash { expected: u64, found: u64 },

    #[error("stage {stage} cannot start: {reason}")]
    StageOrder { stage: u8, reason: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("dataset file {}: {detail}", file.display())]
    Dataset { file: PathBuf, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
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
