use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::tokenize::{DIGIT_TOKEN, SEP_TOKEN};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// The null (∅) token: "no corresponding keyphrase".
pub const NULL: usize = 4;
pub const UNK: usize = 5;
pub const DIGIT: usize = 6;

pub const NULL_TOKEN: &str = "[null]";

const SPECIALS: [&str; 7] = ["[pad]", "[bos]", "[eos]", SEP_TOKEN, NULL_TOKEN, "[unk]", DIGIT_TOKEN];

/// Word-level vocabulary with the special tokens at fixed ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials followed by every distinct token seen (frequency floor 1),
    /// in sorted order so the result does not depend on corpus order.
    pub fn build<'a, I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut seen = BTreeSet::new();
        for seq in sequences {
            for t in seq {
                if !SPECIALS.contains(&t.as_str()) {
                    seen.insert(t.clone());
                }
            }
        }
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(seen).collect();
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_specials(&self) -> bool {
        SPECIALS.iter().enumerate().all(|(i, s)| self.tokens.get(i).map(String::as_str) == Some(*s))
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[unk]", String::as_str)
    }

    pub fn tokens_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build([vec!["b".to_string(), "a".to_string(), "[sep]".to_string()].as_slice()]);
        assert!(v.has_specials());
        assert_eq!(v.id("[null]"), NULL);
        assert_eq!(v.id("[digit]"), DIGIT);
        assert_eq!(v.id("a"), 7);
        assert_eq!(v.id("b"), 8);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.len(), 9);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build([vec!["x".to_string()].as_slice()]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
