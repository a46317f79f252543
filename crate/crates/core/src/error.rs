use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("unknown label {label:?} in post {post_id:?}")]
    UnknownLabel { post_id: String, label: String },

    #[error("unknown schema {0:?}")]
    UnknownSchema(String),

    #[error("post {post_id:?}: span [{start},{end}) out of range for text of {len} characters")]
    OffsetOutOfRange {
        post_id: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("corpus failed validation with {0} error(s); run validate_corpus for details")]
    InvalidCorpus(usize),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Backend(#[from] BackendError),
}
