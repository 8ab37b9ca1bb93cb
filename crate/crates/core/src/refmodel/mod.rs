//! Reference language model: a reversible word/symbol tokenizer and a
//! stupid-backoff n-gram model that reproduces its training data.

mod ngram;
mod vocab;

pub use ngram::{NGramModel, DEFAULT_BACKOFF_ALPHA, LOGPROB_FLOOR, MODEL_MAGIC};
pub use vocab::{split_tokens, Vocabulary, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN};

use thiserror::Error;

use crate::TokenId;

#[derive(Debug, Error)]
pub enum RefModelError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(TokenId),
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
