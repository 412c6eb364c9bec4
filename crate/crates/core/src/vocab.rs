//! Word-level vocabulary built from prompt and candidate strings.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const START: &str = "<s>";
pub const END: &str = "</s>";

/// Lowercase, whitespace-split words of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

/// Dense token ids: `<pad>`=0, `<s>`=1, `</s>`=2, then words in order of first
/// appearance. Unknown words are rejected, never mapped to a fallback id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in [PAD, START, END] {
            v.insert(s.to_string());
        }
        for text in texts {
            for w in words(text) {
                v.insert(w);
            }
        }
        v
    }

    fn insert(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.tokens.len());
            self.tokens.push(w);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn start(&self) -> usize {
        1
    }

    pub fn end(&self) -> usize {
        2
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        words(text)
            .map(|w| self.id(&w).ok_or(Error::OutOfVocabulary(w)))
            .collect()
    }
}
