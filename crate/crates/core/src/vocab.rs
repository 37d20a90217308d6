//! Character vocabulary with CTC blank at id 0 and a shared sos/eos at the top.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::config("vocab", "needs at least one character"));
        }
        let mut seen = BTreeSet::new();
        for &c in &chars {
            if !seen.insert(c) {
                return Err(Error::config("vocab", format!("duplicate character {:?}", c)));
            }
        }
        Ok(Vocabulary { chars })
    }

    /// Sorted set of characters occurring in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::new(set.into_iter().collect())
    }

    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn sos_eos_id(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Data(format!("character {:?} is not in the vocabulary", c)))
            })
            .collect()
    }

    /// Maps ids back to text, dropping blank and sos/eos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BLANK_ID && i != self.sos_eos_id())
            .filter_map(|&i| self.chars.get(i - 1))
            .collect()
    }
}

impl TryFrom<String> for Vocabulary {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Vocabulary::new(s.chars().collect())
    }
}

impl From<Vocabulary> for String {
    fn from(v: Vocabulary) -> String {
        v.chars.into_iter().collect()
    }
}
