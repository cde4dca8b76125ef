use std::path::PathBuf;

/// Errors produced anywhere in the library.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto stable exit codes without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid reference weights: {0}")]
    InvalidWeights(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite or out-of-range numeric input: {0}")]
    NumericInput(String),

    #[error("cannot encode {text:?}: symbol {symbol:?} is not in the vocabulary")]
    Encoding { text: String, symbol: char },

    #[error("gradient tape already consumed")]
    TapeConsumed,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
