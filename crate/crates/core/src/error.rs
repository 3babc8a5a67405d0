use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing or invalid field `{field}`")]
    Schema {
        path: String,
        line: usize,
        field: String,
    },

    #[error("incompatible adapter for `{matrix}`: {detail}")]
    Incompatible { matrix: String, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad user input (including a missing input
    /// file) rather than a bug or an I/O failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Contract(_) => false,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}
