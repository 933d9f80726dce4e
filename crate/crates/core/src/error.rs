use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PgtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PgtError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("context overflow: {what} needs {needed} tokens but the limit is {limit}")]
    ContextOverflow { what: String, needed: usize, limit: usize },

    #[error("vocabulary overflow while ingesting document `{doc_id}` (limit {limit} tokens)")]
    VocabularyOverflow { doc_id: String, limit: usize },

    #[error("empty {0}")]
    Empty(String),

    #[error("non-finite {what} (item {item})")]
    NonFinite { what: String, item: String },

    #[error("unscripted prompt (fingerprint {0})")]
    UnscriptedPrompt(String),

    #[error("teacher backend failure: {0}")]
    Backend(String),

    #[error("authentication failed: {0}")]
    Auth(String),

    #[error("too many unparseable completions: {failed} of {total}")]
    ParseFailures { failed: usize, total: usize },

    #[error("missing prerequisite: run `{command}` first ({detail})")]
    Prerequisite { command: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl PgtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PgtError::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for PgtError {
    fn from(e: serde_json::Error) -> Self {
        PgtError::Serde(e.to_string())
    }
}
