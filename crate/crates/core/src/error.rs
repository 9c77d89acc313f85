use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the exit code the command-line front end maps them to:
/// configuration problems, bad or inconsistent data, and numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown character {ch:?} in word {word:?}")]
    UnknownChar { ch: char, word: String },

    #[error("no alignable word pairs in batch")]
    NoAlignablePairs,

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::UnknownChar { .. } | Error::NoAlignablePairs => 3,
            Error::NonFinite(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
