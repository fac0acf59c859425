use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, CLS_ID, FIRST_WORD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::index::text;

/// Token ids of one query or title; the first id is always `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.first() != Some(&CLS_ID) {
            return Err(Error::Input("token sequence must start with [CLS]".into()));
        }
        Ok(Self { tokens })
    }

    /// `[CLS]` followed by `content`.
    pub fn from_content(content: &[u32]) -> Self {
        let mut tokens = Vec::with_capacity(content.len() + 1);
        tokens.push(CLS_ID);
        tokens.extend_from_slice(content);
        Self { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Tokens after `[CLS]`.
    pub fn content(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.tokens.len() > config.max_len {
            return Err(Error::Input(format!(
                "sequence of length {} exceeds max_len {}",
                self.tokens.len(),
                config.max_len
            )));
        }
        if let Some(bad) = self.tokens.iter().find(|t| **t as usize >= config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {} outside vocabulary of {}",
                bad, config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Word-level vocabulary with reserved special ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps the `capacity - 4` most frequent words; ties are broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, capacity: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in text::tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = capacity.saturating_sub(FIRST_WORD_ID as usize);
        let words = ranked.into_iter().take(keep).map(|(w, _)| w).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let lookup = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + FIRST_WORD_ID))
            .collect();
        Self { words, lookup }
    }

    /// Number of ids in use, including reserved ones.
    pub fn len(&self) -> usize {
        self.words.len() + FIRST_WORD_ID as usize
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.lookup.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        id.checked_sub(FIRST_WORD_ID)
            .and_then(|i| self.words.get(i as usize))
            .map(String::as_str)
    }

    /// Word ids of `text` without the `[CLS]` prefix.
    pub fn ids(&self, text: &str) -> Vec<u32> {
        text::tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// `[CLS]` + word ids, truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = self.ids(text);
        ids.truncate(max_len.saturating_sub(1));
        TokenSequence::from_content(&ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocab = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Self::from_words(v.words))
    }
}
