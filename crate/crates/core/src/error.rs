use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CsrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CsrError {
    /// A numeric precondition was violated (zero norm, nonpositive scale, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch { context: &'static str, expected: String, found: String },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("feature file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("schema error{}: {message}", sample_suffix(.sample))]
    Schema { sample: Option<String>, message: String },

    #[error("dimension mismatch for sample {sample}: {message}")]
    DimensionMismatch { sample: String, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("concept {concept} has no {what}")]
    MissingConcept { concept: usize, what: &'static str },

    #[error("unknown prototype {concept}:{index}")]
    UnknownPrototype { concept: usize, index: usize },

    #[error("invalid box {index} in {field}: {message}")]
    InvalidBox { field: &'static str, index: usize, message: String },

    #[error("invalid interaction: {field}: {message}")]
    InvalidInteraction { field: String, message: String },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn sample_suffix(sample: &Option<String>) -> String {
    match sample {
        Some(id) => format!(" in sample {id}"),
        None => String::new(),
    }
}

impl CsrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsrError::Io { path: path.into(), source }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        CsrError::ShapeMismatch { context, expected: expected.to_string(), found: found.to_string() }
    }
}
