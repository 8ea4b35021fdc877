use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beginning-of-sequence token, always id 0.
pub const BOS: &str = "<bos>";

/// Word-level vocabulary. Punctuation marks `,` and `.` are separate words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Vocabulary of `<bos>` followed by `words` (duplicates dropped, order kept).
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut list = vec![BOS.to_string()];
        for w in words {
            let w = w.as_ref();
            if !list.iter().any(|x| x == w) {
                list.push(w.to_string());
            }
        }
        Vocab::from(list)
    }

    /// `<bos>`, `w1`, ..., `w{n-1}`.
    pub fn synthetic(n: usize) -> Self {
        Vocab::new((1..n).map(|i| format!("w{i}")))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::OutOfVocabulary {
                id,
                vocab_size: self.words.len(),
            })
    }

    /// Splits on whitespace and detaches `,` and `.` from words.
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let mut word = String::new();
            for c in raw.chars() {
                if c == ',' || c == '.' {
                    if !word.is_empty() {
                        out.push(std::mem::take(&mut word));
                    }
                    out.push(c.to_string());
                } else {
                    word.push(c);
                }
            }
            if !word.is_empty() {
                out.push(word);
            }
        }
        out
    }

    /// Token ids of `text`, with BOS prepended.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![0];
        for w in Self::split(text) {
            ids.push(self.id(&w)?);
        }
        Ok(ids)
    }

    /// Token ids of pre-split words, with BOS prepended.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let mut ids = vec![0];
        for w in words {
            ids.push(self.id(w.as_ref())?);
        }
        Ok(ids)
    }

    /// Space-joined words, skipping BOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id != 0 {
                words.push(self.word(id)?);
            }
        }
        Ok(words.join(" "))
    }
}
