use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or corrupt image {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("dataset pairing error: {0}")]
    Pairing(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("feature channel {channel} is constant over the field of view")]
    DegenerateChannel { channel: usize },

    #[error("not enough field-of-view pixels: requested {requested}, available {available}")]
    InsufficientPixels { requested: usize, available: usize },

    #[error("training sample contains no pixels of class {0}")]
    MissingClass(&'static str),

    #[error("too few samples for EM: {samples} samples, need at least {required}")]
    TooFewSamples { samples: usize, required: usize },

    #[error("mixture component {component} has a covariance that is not positive definite")]
    SingularComponent { component: usize },

    #[error("feature stack does not match the model: {0}")]
    StatsMismatch(String),

    #[error("metric {0} is undefined: zero denominator")]
    EmptyDenominator(&'static str),

    #[error("malformed model file: {0}")]
    Model(String),

    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: (usize, usize), found: (usize, usize)) -> Self {
        Error::DimensionMismatch { expected, found }
    }

    /// Attach a dataset record id to an error.
    pub fn in_record(self, id: impl Into<String>) -> Self {
        Error::Record {
            id: id.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line tool:
    /// 2 config/layout, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Record { source, .. } => source.exit_code(),
            Error::Io { .. } | Error::Format { .. } | Error::Model(_) => 4,
            Error::SingularComponent { .. }
            | Error::TooFewSamples { .. }
            | Error::DegenerateChannel { .. }
            | Error::EmptyDenominator(_) => 3,
            Error::Layout(_)
            | Error::Pairing(_)
            | Error::DimensionMismatch { .. }
            | Error::Config(_)
            | Error::InsufficientPixels { .. }
            | Error::MissingClass(_)
            | Error::StatsMismatch(_) => 2,
        }
    }
}
