use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An id that does not resolve against the ontology.
    #[error("unknown reference: {0}")]
    Reference(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{context}: parse error at line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A remote provider could not be reached or answered with an error.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("invalid state: {0}")]
    State(String),

    /// The completion could not be mapped to a known topic/intent.
    #[error("unknown intent in completion: {raw}")]
    UnknownIntent { raw: String },

    #[error("estimate undefined: {0}")]
    UndefinedEstimate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse {
            context: context.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport { .. } => 2,
            _ => 1,
        }
    }
}
