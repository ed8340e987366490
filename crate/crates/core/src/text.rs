//! Word-level tokenization and vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Token ↔ id map with the four reserved ids `PAD, UNK, BOS, EOS` first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Tokenizes `text` and maps every token to its id, unknown words to UNK.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            return Err(CoreError::EmptyText);
        }
        Ok(ids)
    }

    /// `(token, id)` pairs in id order.
    pub fn to_json(&self) -> String {
        let pairs: Vec<(&str, usize)> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string(&pairs).expect("vocabulary serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut pairs: Vec<(String, usize)> = serde_json::from_str(s)?;
        pairs.sort_by_key(|p| p.1);
        for (i, (tok, id)) in pairs.iter().enumerate() {
            if *id != i {
                return Err(CoreError::field(
                    format!("[{i}]"),
                    format!("ids must be contiguous from 0, found {id}"),
                ));
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(CoreError::field(
                    format!("[{i}]"),
                    format!("reserved id {i} must be {}", RESERVED[i]),
                ));
            }
        }
        Ok(Vocabulary::from_tokens(
            pairs.into_iter().map(|p| p.0).collect(),
        ))
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<(&str, usize)> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Vocabulary::from_json(&v.to_string()).map_err(serde::de::Error::custom)
    }
}

/// Builds a vocabulary from the tokens occurring at least `min_freq` times.
/// Ids are assigned by descending frequency, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for tok in tokenize(line.as_ref()) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocabulary::from_tokens(tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_freq_filters() {
        let v = build_vocab(&["a b", "a"], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
    }

    #[test]
    fn deterministic_ids() {
        let corpus = ["the red circle", "a blue square", "the blue ring"];
        assert_eq!(build_vocab(&corpus, 1).unwrap(), build_vocab(&corpus, 1).unwrap());
    }

    #[test]
    fn reserved_plus_distinct() {
        let v = build_vocab(&["x y z"], 1).unwrap();
        assert_eq!(v.len(), 3 + 4);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
    }

    #[test]
    fn empty_corpus_is_error() {
        let empty: [&str; 0] = [];
        assert_eq!(build_vocab(&empty, 1), Err(CoreError::EmptyCorpus));
    }

    #[test]
    fn unseen_maps_to_unk() {
        let v = build_vocab(&["red circle"], 1).unwrap();
        assert_eq!(v.encode("Red, hexagon!").unwrap(), vec![v.id("red"), UNK]);
        assert_eq!(v.encode(" ,. "), Err(CoreError::EmptyText));
    }

    #[test]
    fn json_roundtrip() {
        let v = build_vocab(&["two red circles", "a red square"], 1).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_json(r#"[["<pad>",0],["x",2]]"#).is_err());
    }
}
