use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("irreparable lead {lead}: no finite samples")]
    IrreparableLead { lead: usize },

    #[error("no heartbeats detected")]
    NoHeartbeats,

    #[error("inert attention row {row}: no allowed columns")]
    InertRow { row: usize },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("undefined AUC: labels contain a single class")]
    UndefinedAuc,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
