//! Word-level vocabulary.
//!
//! Text is split on whitespace. A trailing `.`, `,`, `;`, `?` or `!` is split
//! off a word into its own token so that `Munich.` and `Munich` share the word
//! token; decoding glues such punctuation back onto the preceding word.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

const GLUE: [char; 5] = ['.', ',', ';', '?', '!'];

fn is_glue(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if GLUE.contains(&c))
}

/// Splits text into word tokens.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        match word.char_indices().last() {
            Some((i, c)) if i > 0 && GLUE.contains(&c) => {
                out.push(&word[..i]);
                out.push(&word[i..]);
            }
            _ => out.push(word),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Collects every word of `texts`; word ids follow the specials in sorted
    /// token order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in split_words(text) {
                if !SPECIALS.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary needs at least {} tokens, got {}",
                SPECIALS.len() + 1,
                tokens.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Config(format!(
                    "vocabulary id {i} must be {s}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, gluing punctuation tokens to the
    /// previous word. Special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if (id as usize) < SPECIALS.len() {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if !out.is_empty() && !is_glue(tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_trailing_punctuation() {
        assert_eq!(
            split_words("Subject: Palaeontological Museum, Munich. Relation: architect. Object:"),
            vec![
                "Subject:",
                "Palaeontological",
                "Museum",
                ",",
                "Munich",
                ".",
                "Relation:",
                "architect",
                ".",
                "Object:"
            ]
        );
        assert_eq!(split_words("."), vec!["."]);
        assert_eq!(split_words(""), Vec::<&str>::new());
    }

    #[test]
    fn specials_and_unk() {
        let v = Vocab::build(["a b c"]).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.encode("a zzz"), vec![v.id("a").unwrap(), UNK]);
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[BOS, v.id("a").unwrap(), EOS]), "a");
    }

    #[test]
    fn rejects_bad_token_lists() {
        assert!(Vocab::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect()).is_err());
        let mut toks: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        toks.swap(0, 1);
        toks.push("x".into());
        assert!(Vocab::from_tokens(toks).is_err());
        let mut dup: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        dup.push("x".into());
        dup.push("x".into());
        assert!(Vocab::from_tokens(dup).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(["hello world."]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec("[a-z]{1,6}[.,]?", 1..12)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()]).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }
    }
}
