//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// File-system failure, with the path that was being touched.
    Io { path: PathBuf, source: std::io::Error },
    /// A JSONL line (1-based) that could not be parsed into a record.
    MalformedRecord { path: PathBuf, line: usize, message: String },
    /// A dataset that violates its invariants (duplicate ids, empty fields).
    InvalidDataset { message: String },
    /// A caller-supplied argument outside its contract.
    InvalidArgument { message: String },
    /// A backend call that failed after retries were exhausted.
    Backend { message: String },
    /// The mock model was asked to score a token outside its vocabulary.
    OovToken { token: String },
    /// The mock model was asked to score a transition with zero probability.
    ImpossibleTransition { from: String, to: String },
    /// A token log-probability that is NaN or infinite, by position.
    NonFiniteLogProb { position: usize, value: f64 },
    /// An empty input where the contract requires content.
    EmptyInput { what: String },
    /// A judge reply from which no in-range score could be parsed.
    ScoreParse { reply: String, lo: i32, hi: i32 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            Error::MalformedRecord { path, line, message } => {
                write!(f, "{}: line {}: {}", path.display(), line, message)
            }
            Error::InvalidDataset { message } => write!(f, "invalid dataset: {}", message),
            Error::InvalidArgument { message } => write!(f, "invalid argument: {}", message),
            Error::Backend { message } => write!(f, "backend error: {}", message),
            Error::OovToken { token } => {
                write!(f, "token {:?} is not in the mock model vocabulary", token)
            }
            Error::ImpossibleTransition { from, to } => write!(
                f,
                "mock model assigns zero probability to {:?} after {:?}",
                to, from
            ),
            Error::NonFiniteLogProb { position, value } => write!(
                f,
                "non-finite log-probability {} at token position {}",
                value, position
            ),
            Error::EmptyInput { what } => write!(f, "{} must not be empty", what),
            Error::ScoreParse { reply, lo, hi } => write!(
                f,
                "no integer score in [{}, {}] found in judge reply: {:?}",
                lo, hi, reply
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid_dataset(message: impl Into<String>) -> Self {
        Error::InvalidDataset { message: message.into() }
    }

    pub fn invalid_argument(message: impl Into<String>) -> Self {
        Error::InvalidArgument { message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Error::Backend { message: message.into() }
    }

    pub fn empty(what: impl Into<String>) -> Self {
        Error::EmptyInput { what: what.into() }
    }
}
