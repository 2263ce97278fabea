use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SUBQ: usize = 3;
pub const SUBA: usize = 4;
pub const FINAL: usize = 5;

pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<subq>", "<suba>", "<final>"];

/// Every word the question grammar and answer space can produce.
pub const WORDS: [&str; 48] = [
    "what",
    "is",
    "the",
    "where",
    "there",
    "a",
    "which",
    "shapes",
    "are",
    "how",
    "many",
    "that",
    "cell",
    "of",
    "at",
    "more",
    "than",
    "row",
    "col",
    "color",
    "shape",
    "size",
    "left",
    "right",
    "above",
    "below",
    "yes",
    "no",
    "none",
    "red",
    "green",
    "blue",
    "yellow",
    "small",
    "large",
    "circle",
    "circles",
    "square",
    "squares",
    "triangle",
    "triangles",
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
];

/// Closed token inventory with the six structural specials at indices 0-5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(WORDS.iter().map(|w| w.to_string())).expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    /// Specials first, then `words` in order.
    pub fn new(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Index(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} not in vocabulary")))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
