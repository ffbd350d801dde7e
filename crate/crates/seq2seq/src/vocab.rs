//! Growing token vocabulary with reserved ids.

use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::tokenizer::{CAP, UPPER};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 6] = ["⟨pad⟩", "⟨bos⟩", "⟨eos⟩", "⟨unk⟩", CAP, UPPER];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Insert `token` unless the vocabulary already holds `capacity` entries.
    pub fn add(&mut self, token: &str, capacity: usize) -> Option<u32> {
        if let Some(id) = self.id(token) {
            return Some(id);
        }
        if self.tokens.len() >= capacity {
            return None;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        Some(id)
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(serde::de::Error::custom(
                "vocabulary does not start with the reserved tokens",
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grows_to_capacity() {
        let mut v = Vocab::default();
        assert_eq!(v.id("⟨eos⟩"), Some(EOS));
        assert_eq!(v.add("book", 8), Some(6));
        assert_eq!(v.add("book", 8), Some(6));
        assert_eq!(v.add("flight", 8), Some(7));
        assert_eq!(v.add("extra", 8), None);
        assert_eq!(v.token(7), Some("flight"));
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocab>(r#"["a"]"#).is_err());
    }
}
