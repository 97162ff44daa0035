use std::path::PathBuf;

/// Errors surfaced by the tokenizer toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model, training or calibration configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("score {0} outside 1..=9")]
    ScoreRange(i64),

    #[error("scoring unavailable after {attempts} attempt(s): {last}")]
    ScoringUnavailable { attempts: usize, last: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! contract {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use contract;
