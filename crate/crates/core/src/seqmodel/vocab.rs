//! Closed toy vocabulary built from the caption grammar.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("word `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("token index {0} out of range")]
    BadIndex(usize),
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials occupy fixed indices 0..=3, then the ordered word list.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut all: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<sep>"].iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words: all, index }
    }

    /// The full grammar of the toy caption generator.
    pub fn toy() -> Self {
        let mut words: Vec<String> = (0..=9).map(|d| d.to_string()).collect();
        for w in [
            "vehicles", "vehicles:", "buildings", "buildings:", "vehicle", "building", "ahead",
            "behind", "left", "right", "near", "far", ",", ";", "ego", "moving", "stopped",
            "describe", "the", "scene",
        ] {
            words.push(w.to_string());
        }
        Vocabulary::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, idx: usize) -> Result<&str, VocabError> {
        self.words.get(idx).map(|s| s.as_str()).ok_or(VocabError::BadIndex(idx))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().ok_or_else(|| VocabError::UnknownWord(w.to_string())))
            .collect()
    }

    /// Inverse of [`encode`]; exact round trip for grammar text.
    pub fn decode(&self, indices: &[usize]) -> Result<String, VocabError> {
        let words: Result<Vec<&str>, _> = indices.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }
}
