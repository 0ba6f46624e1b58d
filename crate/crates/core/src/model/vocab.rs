use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::synthdata::{Color, Shape, NUMERALS};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const POS_OPEN: &str = "<";
pub const POS_CLOSE: &str = ">";

const FUNCTION_WORDS: [&str; 12] = [
    "a", "the", "there", "is", "are", "and", "no", "of", "left", "right", "above", "below",
];

/// Closed token inventory. Ids: special tokens first, then words, then
/// (when position tokens are enabled) the delimiters and one token per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    position_bins: Option<usize>,
}

impl Vocab {
    pub fn new(position_bins: Option<usize>) -> Self {
        let mut tokens: Vec<String> = [PAD, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        tokens.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        for s in Shape::ALL {
            tokens.push(s.noun().to_string());
            tokens.push(s.plural().to_string());
        }
        tokens.extend(NUMERALS.iter().map(|s| s.to_string()));
        if let Some(bins) = position_bins {
            tokens.push(POS_OPEN.to_string());
            tokens.push(POS_CLOSE.to_string());
            tokens.extend((0..bins).map(|b| b.to_string()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            position_bins,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position_bins(&self) -> Option<usize> {
        self.position_bins
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("#{id}")))
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn cls(&self) -> usize {
        1
    }

    pub fn sep(&self) -> usize {
        2
    }

    pub fn mask(&self) -> usize {
        3
    }

    /// True for `[PAD]`, `[CLS]`, `[SEP]` and `[MASK]`.
    pub fn is_special(&self, id: usize) -> bool {
        id < 4
    }

    pub fn is_position_bin(&self, id: usize) -> bool {
        match self.position_bins {
            Some(bins) => id >= self.len() - bins,
            None => false,
        }
    }

    pub fn is_position_delimiter(&self, id: usize) -> bool {
        match self.position_bins {
            Some(bins) => {
                let open = self.len() - bins - 2;
                id == open || id == open + 1
            }
            None => false,
        }
    }

    /// `[CLS] words... [SEP]`.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<Vec<usize>> {
        let len = words.len() + 2;
        if len > max_len {
            return Err(Error::Length { len, max: max_len });
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(self.cls());
        for w in words {
            ids.push(self.id(w.as_ref())?);
        }
        ids.push(self.sep());
        Ok(ids)
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.encode_words(&words, max_len)
    }
}
