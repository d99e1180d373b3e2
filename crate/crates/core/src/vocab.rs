//! Whitespace word-level tokenizer over a fixed vocabulary file.
//!
//! `vocab.txt` holds one token per line; the line number is the token id.
//! Unknown words map to the `<unk>` id, which must be present.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const UNK: &str = "<unk>";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    unk: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Precondition(format!(
                    "vocabulary entry {i} ({t:?}) is empty or contains whitespace"
                )));
            }
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Precondition(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        let unk = *ids
            .get(UNK)
            .ok_or_else(|| Error::Precondition(format!("vocabulary lacks {UNK}")))?;
        Ok(Self { tokens, ids, unk })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        Self::new(tokens).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.unk))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Text to token ids and back.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>>;
    fn decode(&self, ids: &[TokenId]) -> Result<String>;
}

impl Tokenizer for Vocab {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        Ok(Vocab::encode(self, text))
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(Vocab::decode(self, ids))
    }
}
