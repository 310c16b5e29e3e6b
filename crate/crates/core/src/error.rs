use std::path::PathBuf;

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum PolyglotError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown language {lang:?}; registered languages: {}", registered.join(", "))]
    UnknownLanguage { lang: String, registered: Vec<String> },
    #[error("phoneme id {id} is out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: usize },
}

impl PolyglotError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PolyglotError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        PolyglotError::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T, E = PolyglotError> = std::result::Result<T, E>;
