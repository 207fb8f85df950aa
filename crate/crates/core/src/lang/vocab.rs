use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Tokenized instruction. Always holds at least one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub tokens: Vec<usize>,
    pub raw: String,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token-to-id map with reserved padding and unknown-word ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(Vec::new())
    }
}

impl From<Vec<String>> for Vocabulary {
    /// Builds from a token list. Reserved tokens are always ids 0 and 1,
    /// whether or not the list starts with them.
    fn from(tokens: Vec<String>) -> Self {
        let mut vocab = Self {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        vocab.index.insert(PAD_TOKEN.to_string(), PAD);
        vocab.index.insert(UNK_TOKEN.to_string(), UNK);
        for token in tokens {
            vocab.insert(&token);
        }
        vocab
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.tokens
    }
}

impl Vocabulary {
    /// Collects every normalized word of `texts`, in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::default();
        for text in texts {
            for word in normalize(text) {
                vocab.insert(&word);
            }
        }
        vocab
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize(raw: &str) -> Vec<String> {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Maps text to token ids; unknown words become [`UNK`]. Text without any
/// word yields a single `UNK`.
pub fn tokenize(raw: &str, vocab: &Vocabulary) -> Instruction {
    let mut tokens: Vec<usize> = normalize(raw).iter().map(|w| vocab.id(w)).collect();
    if tokens.is_empty() {
        tokens.push(UNK);
    }
    Instruction {
        tokens,
        raw: raw.to_string(),
    }
}
