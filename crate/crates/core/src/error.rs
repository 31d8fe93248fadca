//! Error type shared by all toolkit modules.

use std::fmt;
use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the toolkit.
#[derive(Debug)]
pub enum Error {
    /// I/O failure while touching `path`.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Parallel corpus files disagree on line counts.
    Alignment {
        file: PathBuf,
        expected: usize,
        actual: usize,
    },
    /// A corpus file contains an empty sentence.
    EmptyLine { path: PathBuf, line: usize },
    /// A caller passed an argument outside its documented range.
    InvalidArgument(String),
    /// Tensor shapes incompatible for the named operation.
    Dimension { op: &'static str, detail: String },
    /// A precondition of an operation was violated.
    Contract(String),
    /// A file did not match its expected format.
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    /// A token id outside the vocabulary range.
    IdRange { id: usize, size: usize },
    /// A subword sequence ended on a continuation unit.
    DanglingContinuation { unit: String },
    /// Checkpoint format or config/vocabulary mismatch.
    Checkpoint(String),
    /// Training aborted (e.g. the loss became non-finite).
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
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

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            Error::Alignment {
                file,
                expected,
                actual,
            } => write!(
                f,
                "alignment error: {} has {} lines, expected {}",
                file.display(),
                actual,
                expected
            ),
            Error::EmptyLine { path, line } => {
                write!(f, "{}: empty sentence at line {}", path.display(), line)
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Parse { path, line, detail } => {
                write!(f, "{}:{}: {}", path.display(), line, detail)
            }
            Error::IdRange { id, size } => {
                write!(f, "token id {id} out of range for vocabulary of size {size}")
            }
            Error::DanglingContinuation { unit } => {
                write!(f, "dangling continuation unit at end of sequence: {unit:?}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Training {
                epoch,
                batch,
                detail,
            } => write!(f, "training aborted at epoch {epoch}, batch {batch}: {detail}"),
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
