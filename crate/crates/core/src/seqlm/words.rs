use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::SeqError;
use crate::group::{ActionKind, GroupAction};

/// Word list with a string ↔ id map.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self, SeqError> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.as_ref().to_string(), i).is_some() {
                return Err(SeqError::WordSets(format!("duplicate word {:?}", w.as_ref())));
            }
        }
        Ok(Self {
            words: words.iter().map(|w| w.as_ref().to_string()).collect(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize, SeqError> {
        self.index.get(word).copied().ok_or_else(|| SeqError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, SeqError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.words.get(i).map_or("<?>", String::as_str)).collect::<Vec<_>>().join(" ")
    }
}

/// On-disk form: `{"equality": [["man","woman"], ...], "neutral": [...], "d": 2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordSetsDoc {
    pub equality: Vec<Vec<String>>,
    #[serde(default)]
    pub neutral: Vec<String>,
    pub d: usize,
}

impl WordSetsDoc {
    pub fn from_json(text: &str) -> Result<Self, SeqError> {
        serde_json::from_str(text).map_err(|e| SeqError::WordSets(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("word sets serialize")
    }
}

/// Equality tuples, neutral and general words as vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSets {
    pub equality: Vec<Vec<usize>>,
    pub neutral: Vec<usize>,
    pub general: Vec<usize>,
    pub d: usize,
}

impl WordSets {
    /// Strict sets put every word outside the equality tuples into `neutral`;
    /// relaxed sets keep the listed neutral words and send the rest to `general`.
    pub fn resolve(doc: &WordSetsDoc, vocab: &Vocab, relaxed: bool) -> Result<Self, SeqError> {
        let equality = doc
            .equality
            .iter()
            .map(|t| t.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let listed = doc.neutral.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>, _>>()?;
        let in_eq: Vec<bool> = {
            let mut m = vec![false; vocab.len()];
            equality.iter().flatten().for_each(|&i| m[i] = true);
            m
        };
        let (neutral, general) = if relaxed {
            let mut is_listed = vec![false; vocab.len()];
            listed.iter().for_each(|&i| is_listed[i] = true);
            let general = (0..vocab.len()).filter(|&i| !in_eq[i] && !is_listed[i]).collect();
            (listed, general)
        } else {
            ((0..vocab.len()).filter(|&i| !in_eq[i]).collect(), Vec::new())
        };
        let ws = Self {
            equality,
            neutral,
            general,
            d: doc.d,
        };
        ws.validate()?;
        Ok(ws)
    }

    pub fn validate(&self) -> Result<(), SeqError> {
        if self.d == 0 {
            return Err(SeqError::WordSets("d must be positive".into()));
        }
        if let Some(t) = self.equality.iter().find(|t| t.len() != self.d) {
            return Err(SeqError::WordSets(format!("equality tuple {t:?} does not have length {}", self.d)));
        }
        let mut seen = std::collections::HashSet::new();
        for &id in self.equality.iter().flatten().chain(&self.neutral).chain(&self.general) {
            if !seen.insert(id) {
                return Err(SeqError::WordSets(format!("word id {id} appears in more than one place")));
            }
        }
        Ok(())
    }

    pub fn is_general(&self, id: usize) -> bool {
        self.general.contains(&id)
    }
}

/// Cyclic group of order `d` advancing each equality word to the next one
/// in its tuple; every other word is fixed.
pub fn word_swap_action(ws: &WordSets) -> Result<GroupAction, SeqError> {
    ws.validate()?;
    Ok(GroupAction::cyclic(
        ws.d,
        ActionKind::VocabCycle {
            tuples: ws.equality.clone(),
        },
    )?)
}
