//! Word-level token vocabulary over the synthetic corpus alphabet.
//!
//! Tokenization splits on ASCII whitespace, so it is reversible (via a single
//! space join) for any text made of known words separated by single spaces.

use std::collections::HashMap;

use crate::error::{invalid_arg, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

#[derive(Debug, Clone)]
pub struct TokenVocab {
    id_of: HashMap<String, usize>,
    tokens: Vec<String>,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub sep: usize,
}

impl TokenVocab {
    /// Build a vocabulary from an iterator of corpus tokens. Duplicates are
    /// collapsed; ordering is specials first, then the remaining tokens
    /// sorted, so the id assignment is deterministic for a fixed token set.
    pub fn build<I, S>(corpus_tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = corpus_tokens
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        words.sort();
        words.dedup();

        let specials = [PAD, BOS, EOS, SEP];
        let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !specials.contains(&w.as_str())));
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenVocab {
            id_of,
            tokens,
            pad: 0,
            bos: 1,
            eos: 2,
            sep: 3,
        }
    }

    /// Collect the whitespace tokens of several texts; convenience for
    /// vocabulary construction.
    pub fn tokens_of(texts: &[&str]) -> Vec<String> {
        texts
            .iter()
            .flat_map(|t| t.split_whitespace().map(|w| w.to_string()))
            .collect()
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.bos || id == self.eos || id == self.sep
    }

    /// Whitespace tokenization into known ids; unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            match self.id_of.get(w) {
                Some(&id) => out.push(id),
                None => invalid_arg!("unknown token {w:?}"),
            }
        }
        Ok(out)
    }

    /// Join tokens with single spaces, skipping special ids.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| !self.is_special(id) && id < self.tokens.len())
            .map(|&id| self.tokens[id].as_str())
            .collect();
        words.join(" ")
    }
}
