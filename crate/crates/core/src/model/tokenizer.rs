use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Word-level tokenizer: lowercased words, with every punctuation mark a
/// token of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    pub max_length: usize,
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    /// Vocabulary of every word in `corpus`, ids assigned in sorted order
    /// after the special tokens.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_length: usize) -> Self {
        let set: BTreeSet<String> = corpus.into_iter().flat_map(split_words).collect();
        Self::from_words(set.into_iter().collect(), max_length)
    }

    fn from_words(words: Vec<String>, max_length: usize) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        let mut t = Tokenizer { words: all, index: BTreeMap::new(), max_length: max_length.max(2) };
        t.reindex();
        t
    }

    fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Words after the special tokens, in id order.
    pub fn words(&self) -> &[String] {
        &self.words[SPECIALS.len()..]
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// `[CLS]` followed by the word ids, truncated to `max_length`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(split_words(text).iter().map(|w| self.id(w)));
        if ids.len() > self.max_length {
            log::warn!("caption of {} tokens truncated to {}: {text:?}", ids.len(), self.max_length);
            ids.truncate(self.max_length);
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != CLS)
            .map(|&i| self.words.get(i).map_or("[UNK]", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tokenizer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Tokenizer = serde_json::from_str(s)?;
        if t.words.len() < SPECIALS.len() || t.words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config { key: "vocab".into(), message: "special tokens missing".into() });
        }
        let words = t.words[SPECIALS.len()..].to_vec();
        let n = words.len();
        let out = Self::from_words(words, t.max_length);
        if out.words().len() != n || out.index.len() != out.words.len() {
            return Err(Error::Config { key: "vocab".into(), message: "duplicate words".into() });
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
