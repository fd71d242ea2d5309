use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, MimirError>;

#[derive(Debug, thiserror::Error)]
pub enum MimirError {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("target `{target}` rejected: {reason}")]
    TargetRejected { target: String, reason: String },

    #[error("unknown target `{0}`")]
    UnknownTarget(String),

    #[error("no usable training rows for fold {fold:?}")]
    NoTrainingRows { fold: Option<usize> },

    #[error("backward called with a cache from different parameters or batch")]
    StaleCache,

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("unsupported {what} version {version}")]
    Version { what: String, version: u16 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl MimirError {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MimirError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        MimirError::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        MimirError::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MimirError::Io {
            path: path.into(),
            source,
        }
    }
}
