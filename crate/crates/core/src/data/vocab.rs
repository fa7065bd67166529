use std::collections::HashMap;

use super::DataError;
use crate::model::{EOS_ID, MASK_ID, PAD_ID};

pub const VOCAB_VERSION: u32 = 1;

const SPECIALS: [&str; 3] = ["<pad>", "<mask>", "<eos>"];

const WORDS: &[&str] = &[
    // colors
    "red", "green", "blue", "yellow", "black",
    // shapes
    "circle", "square", "triangle", "star",
    "circles", "squares", "triangles", "stars",
    "shape", "shapes",
    // counts
    "one", "two", "three", "four",
    // cell positions
    "top", "bottom", "left", "right", "row", "column",
    // fine-grained attributes
    "small", "large", "outlined", "filled",
    // function words
    "a", "the", "then", "and", "with", "what", "color", "is", "at", "in",
    "how", "many", "are", "there",
];

/// Closed whitespace vocabulary; an id is the token's line in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn standard() -> Self {
        Self::from_tokens(SPECIALS.iter().chain(WORDS).map(|s| s.to_string()).collect()).expect("built-in vocabulary is well formed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS.map(String::from) {
            return Err(DataError::Vocab("file must start with <pad>, <mask>, <eos>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(DataError::Vocab(format!("line {}: invalid token {t:?}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Vocab(format!("line {}: duplicate token {t:?}", i + 1)));
            }
        }
        debug_assert_eq!((index["<pad>"], index["<mask>"], index["<eos>"]), (PAD_ID, MASK_ID, EOS_ID));
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize, DataError> {
        self.index.get(word).copied().ok_or_else(|| DataError::UnknownWord(word.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}
