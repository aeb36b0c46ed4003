//! Tiny decoder-only causal sequence model standing in for the LLM.

pub mod model;
pub mod vocab;

pub use model::{
    greedy_decode, ntp_loss, ntp_targets, text_tokens, ForwardOut, SeqError, SequenceLayout,
    Transformer,
};
pub use vocab::{Vocabulary, VocabError, BOS, EOS, PAD, SEP};
