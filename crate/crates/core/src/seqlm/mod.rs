//! Toy autoregressive language model, word-swap actions and sequential
//! equizero / equitune decoding for fair generation.

mod corpus;
mod fairness;
mod generate;
mod lm;
mod scorer;
mod words;

pub use corpus::{toy_corpus, toy_word_sets, ToyCorpus, NEGATIVE_WORDS, POSITIVE_WORDS};
pub use fairness::{fairness_eval, fairness_eval_normalized, FairnessReport, SCORE_BINS};
pub use generate::{
    averaged_distribution, equitune_generate, equizero_generate, greedy_generate, GenOptions, Generation, RoundLog, StepLog,
};
pub use lm::{train_lm, FnLm, LanguageModel, LmTrainOpts, ToyLM, ToyLmConfig};
pub use scorer::{LexiconScorer, SentenceScorer};
pub use words::{word_swap_action, Vocab, WordSets, WordSetsDoc};

use crate::diff::DiffError;
use crate::group::ActionError;
use crate::models::ModelError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SeqError {
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("context of {len} tokens exceeds the model limit of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("token {token} outside a vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("invalid word sets: {0}")]
    WordSets(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("invalid generation options: {0}")]
    Options(String),
    #[error("distribution of width {got} does not match vocabulary {want}")]
    Width { got: usize, want: usize },
}

#[cfg(test)]
mod tests;
