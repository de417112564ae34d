//! Whitespace word tokenizer with a fixed reserved-token block.
//!
//! Ids 0..=4 are pinned: `<pad>`, `<bos>`, `<eos>`, the literal `None` used
//! as the empty-history marker, and `,` separating item names in rendered
//! history spans. Everything after the reserved block is ordered by first
//! occurrence, so a vocabulary is a pure function of its inputs.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const NONE: TokenId = 3;
pub const SEP: TokenId = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "None", ","];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    BadTokenId { id: TokenId, size: usize },
    #[error("word {0:?} contains whitespace")]
    WordWithWhitespace(String),
    #[error("token list is not a valid vocabulary: {0}")]
    BadTokenList(String),
    #[error("vocabulary file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Bidirectional word/id table. Equality ignores the derived index.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    /// Reserved block, then unseen template words, then unseen item-name
    /// words, each in first-occurrence order.
    pub fn build<'a>(template: &str, item_names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let push = |word: &str, index: &mut HashMap<String, TokenId>, tokens: &mut Vec<String>| {
            if !index.contains_key(word) {
                index.insert(word.to_string(), tokens.len());
                tokens.push(word.to_string());
            }
        };
        for word in template.split_whitespace() {
            push(word, &mut index, &mut tokens);
        }
        for name in item_names {
            for word in name.split_whitespace() {
                push(word, &mut index, &mut tokens);
            }
        }
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from an ordered token list, validating the
    /// reserved prefix and uniqueness.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(VocabError::BadTokenList(format!(
                "only {} tokens, need at least the {} reserved ones",
                tokens.len(),
                RESERVED_TOKENS.len()
            )));
        }
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(VocabError::BadTokenList(format!(
                    "reserved slot {} holds {:?}, expected {:?}",
                    i, tokens[i], expected
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.chars().any(char::is_whitespace) {
                return Err(VocabError::WordWithWhitespace(t.clone()));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::BadTokenList(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved block is always present
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str, VocabError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(VocabError::BadTokenId { id, size: self.tokens.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace and maps each word; empty input encodes to an
    /// empty sequence.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace()
            .map(|w| self.id_of(w).ok_or_else(|| VocabError::UnknownWord(w.to_string())))
            .collect()
    }

    /// Joins tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let words: Result<Vec<&str>, VocabError> = ids.iter().map(|&id| self.token(id)).collect();
        Ok(words?.join(" "))
    }

    /// Writes the ordered token list as JSON.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let json = serde_json::to_string_pretty(&self.tokens)?;
        crate::fsutil::write_atomic(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let raw = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = serde_json::from_str(&raw)?;
        Self::from_tokens(tokens)
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(deserializer)?;
        Self::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_vocab() -> Vocab {
        Vocab::build("recommend :", ["itm a 01", "itm b 02"])
    }

    #[test]
    fn reserved_ids_are_pinned() {
        let v = sample_vocab();
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(BOS).unwrap(), "<bos>");
        assert_eq!(v.token(EOS).unwrap(), "<eos>");
        assert_eq!(v.token(NONE).unwrap(), "None");
        assert_eq!(v.token(SEP).unwrap(), ",");
    }

    #[test]
    fn vocabulary_counts_reserved_template_and_name_words_once() {
        let v = Vocab::build("recommend :", ["itm a 01"]);
        // 5 reserved + {recommend, :} + {itm, a, 01}
        assert_eq!(v.len(), 10);
        let again = Vocab::build("recommend : recommend", ["itm a 01", "itm a 01"]);
        assert_eq!(again, v);
    }

    #[test]
    fn encode_maps_known_words_and_names_the_unknown_one() {
        let v = sample_vocab();
        let ids = v.encode("recommend itm a 01").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(v.decode(&ids).unwrap(), "recommend itm a 01");
        match v.encode("recommend mystery") {
            Err(VocabError::UnknownWord(w)) => assert_eq!(w, "mystery"),
            other => panic!("expected unknown-word error, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_encodes_to_empty_sequence() {
        let v = sample_vocab();
        assert!(v.encode("").unwrap().is_empty());
        assert!(v.encode("   ").unwrap().is_empty());
    }

    #[test]
    fn none_word_hits_the_reserved_id() {
        let v = sample_vocab();
        assert_eq!(v.encode("None").unwrap(), vec![NONE]);
        assert_eq!(v.decode(&[NONE]).unwrap(), "None");
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = sample_vocab();
        let bad = v.len();
        assert!(matches!(v.decode(&[0, bad]), Err(VocabError::BadTokenId { .. })));
    }

    #[test]
    fn multiple_spaces_normalize_to_single_spaces() {
        let v = sample_vocab();
        let ids = v.encode("itm   a    01").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "itm a 01");
    }

    #[test]
    fn token_list_round_trips_through_json() {
        let v = sample_vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn decode_then_encode_is_identity(ids in proptest::collection::vec(0usize..10, 0..40)) {
            let v = sample_vocab();
            let text = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
        }

        #[test]
        fn encode_then_decode_normalizes_whitespace(
            words in proptest::collection::vec(
                prop_oneof![
                    Just("recommend"), Just(":"), Just("itm"), Just("a"),
                    Just("b"), Just("01"), Just("02"), Just("None"), Just(",")
                ],
                0..30,
            )
        ) {
            let v = sample_vocab();
            let text = words.join("  ");
            let ids = v.encode(&text).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), words.join(" "));
        }
    }
}
