//! Fixed word table: concept nouns, edit words, the connective, and the
//! caption prompt.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT: [&str; 3] = ["a", "photo", "of"];
pub const CONNECTIVE: &str = "that";
pub const ADD: &str = "add";
pub const REMOVE: &str = "remove";
pub const REPLACE: &str = "replace";
pub const WITH: &str = "with";

const CONCEPT_NAMES: [&str; 12] = [
    "cat", "dog", "tree", "car", "ball", "cup", "lamp", "book", "shoe", "bird", "fish", "hat",
];

pub fn concept_name(id: usize) -> String {
    CONCEPT_NAMES
        .get(id)
        .map_or_else(|| format!("thing{id}"), |s| (*s).to_string())
}

/// Words in id order: concepts `0..n`, then edit words, connective, prompt.
/// Serialized as the concept count alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "usize", into = "usize")]
pub struct Vocabulary {
    n_concepts: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(n_concepts: usize) -> Self {
        let mut words: Vec<String> = (0..n_concepts).map(concept_name).collect();
        words.extend([ADD, REMOVE, REPLACE, WITH, CONNECTIVE].map(String::from));
        words.extend(PROMPT.map(String::from));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            n_concepts,
            words,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    /// Concept id for a concept word; other words are rejected.
    pub fn concept_id(&self, word: &str) -> Result<usize> {
        match self.id(word)? {
            id if id < self.n_concepts => Ok(id),
            _ => Err(Error::Format(format!("`{word}` is not a concept word"))),
        }
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn prompt_ids(&self) -> Vec<usize> {
        PROMPT.iter().map(|w| self.index[*w]).collect()
    }
}

impl From<usize> for Vocabulary {
    fn from(n_concepts: usize) -> Self {
        Self::new(n_concepts)
    }
}

impl From<Vocabulary> for usize {
    fn from(v: Vocabulary) -> Self {
        v.n_concepts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_lookup() {
        let v = Vocabulary::new(6);
        assert_eq!(v.len(), 6 + 5 + 3);
        assert_eq!(v.id("cat").unwrap(), 0);
        assert_eq!(v.concept_id("cup").unwrap(), 5);
        assert!(matches!(v.id("zebra"), Err(Error::Vocabulary(_))));
        assert!(v.concept_id("add").is_err());
        assert_eq!(v.prompt_ids().len(), 3);
    }

    #[test]
    fn names_beyond_the_list_are_generated() {
        assert_eq!(concept_name(20), "thing20");
        let v = Vocabulary::new(14);
        assert_eq!(v.concept_id("thing13").unwrap(), 13);
    }
}
