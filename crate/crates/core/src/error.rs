use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("sample `{0}` has an empty id or answer")]
    EmptyField(String),

    #[error("loss for `{id}` must be finite and non-negative, got {value}")]
    InvalidLoss { id: String, value: f64 },

    #[error("sample `{0}` has no loss record")]
    MissingLoss(String),

    #[error("loss record `{0}` does not match any sample")]
    UnknownLoss(String),

    #[error("duplicate loss record for `{0}`")]
    DuplicateLoss(String),

    #[error("manifest references unknown sample `{0}`")]
    DanglingId(String),

    #[error("manifest order disagrees with the source at `{0}`")]
    ManifestOrder(String),

    #[error("need at least 2 values to fit, got {0}")]
    InsufficientData(usize),

    #[error("value for `{0}` is not finite")]
    NonFinite(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
