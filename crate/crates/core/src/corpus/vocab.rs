use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "[BOS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const BLANK: &str = "[BLANK]";
pub const PAD: &str = "[PAD]";

const RESERVED: [&str; 5] = [BOS, SEP, UNK, BLANK, PAD];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const BOS: TokenId = TokenId(0);
    pub const SEP: TokenId = TokenId(1);
    pub const UNK: TokenId = TokenId(2);
    pub const BLANK: TokenId = TokenId(3);
    pub const PAD: TokenId = TokenId(4);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Lowercased word vocabulary with five reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary over the lowercased forms of `words`, sorted so the
    /// result does not depend on iteration order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let unique: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !w.is_empty() && !RESERVED.contains(&w.as_str()))
            .collect();
        let id_to_token: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(unique)
            .collect();
        Self::from_tokens(id_to_token).expect("built vocabulary is well formed")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < RESERVED.len() {
            return Err(Error::Validation("vocabulary is missing reserved tokens".into()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if id_to_token[i] != *r {
                return Err(Error::Validation(format!("vocabulary id {i} must be {r}")));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if i >= RESERVED.len() {
                if tok.is_empty() || tok.chars().any(char::is_whitespace) || *tok != tok.to_lowercase() {
                    return Err(Error::Validation(format!("invalid vocabulary entry {tok:?}")));
                }
            }
            if token_to_id.insert(tok.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self { id_to_token, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of an already-lowercased word; unknown words map to `[UNK]`.
    pub fn id(&self, word: &str) -> TokenId {
        self.token_to_id.get(word).copied().unwrap_or(TokenId::UNK)
    }

    /// Id of a raw word: reserved tokens match exactly, anything else is
    /// lowercased first.
    pub fn lookup(&self, word: &str) -> TokenId {
        match RESERVED.iter().position(|r| *r == word) {
            Some(i) => TokenId(i as u32),
            None => self.id(&word.to_lowercase()),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.token_to_id.contains_key(word)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id.index()).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_tokens(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}
