use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("crc mismatch at byte offset {offset} ({region}): stored {stored:#010x}, computed {computed:#010x}")]
    Crc {
        offset: u64,
        region: String,
        stored: u32,
        computed: u32,
    },

    #[error("numeric abort in {stage}: {snapshot}")]
    NumericAbort { stage: String, snapshot: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 1 config, 2 data, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::State(_) => 1,
            Error::Shape(_) | Error::Format { .. } | Error::Crc { .. } | Error::Io { .. } => 2,
            Error::NonFinite { .. } | Error::NumericAbort { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
