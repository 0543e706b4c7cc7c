use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("label {label} out of range for alphabet of size {alphabet_size}")]
    LabelOutOfRange { label: usize, alphabet_size: usize },

    #[error("node has {slots} child slots but the maximum out-degree is {max_outdegree}")]
    TooManySlots { slots: usize, max_outdegree: usize },

    #[error("malformed tree: {0}")]
    Structure(String),

    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("instance too large for exhaustive enumeration ({assignments} assignments, limit {limit})")]
    TooLarge { assignments: f64, limit: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn at_line(self, line: usize) -> Self {
        Error::Line {
            line,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical(_) => true,
            Error::Line { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
