use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no token occurs at least {min_count} times; vocabulary would be empty")]
    EmptyVocabulary { min_count: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot partition {dim} columns across {shards} shards")]
    Layout { dim: usize, shards: usize },

    #[error("word index {index} out of range for vocabulary of size {vocab_size}")]
    IndexOutOfRange { index: u32, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed frame: {0}")]
    Frame(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("shard {shard} reported error: {message}")]
    Remote { shard: usize, message: String },

    #[error("shard {shard} did not respond: {reason}")]
    Unavailable { shard: usize, reason: String },

    #[error("zero vector has no defined cosine similarity")]
    ZeroVector,

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error("need at least 2 usable judgment pairs, found {0}")]
    TooFewPairs(usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
