use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const END: usize = 1;

/// `pad`, `end`, instruction words, then one token per catalog item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    num_items: usize,
}

impl Vocab {
    /// Words are taken from the whitespace-split template, deduplicated in
    /// order of first appearance.
    pub fn new(template: &str, num_items: usize) -> Self {
        let mut words: Vec<String> = Vec::new();
        for w in template.split_whitespace() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        Self { words, num_items }
    }

    pub fn len(&self) -> usize {
        2 + self.words.len() + self.num_items
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn item_offset(&self) -> usize {
        2 + self.words.len()
    }

    pub fn item_token(&self, item: usize) -> Result<usize> {
        if item >= self.num_items {
            return Err(Error::Prompt(format!("item {item} is not in the vocabulary")));
        }
        Ok(self.item_offset() + item)
    }

    pub fn token_item(&self, token: usize) -> Option<usize> {
        let off = self.item_offset();
        (off..self.len()).contains(&token).then(|| token - off)
    }

    pub fn is_item(&self, token: usize) -> bool {
        self.token_item(token).is_some()
    }

    pub fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.words
                    .iter()
                    .position(|x| x == w)
                    .map(|p| 2 + p)
                    .ok_or_else(|| Error::Prompt(format!("word '{w}' is not in the vocabulary")))
            })
            .collect()
    }
}
