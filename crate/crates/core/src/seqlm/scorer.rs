use std::collections::HashMap;

/// Deterministic sentence score in `[-1, 1]`; higher is better.
pub trait SentenceScorer: Send + Sync {
    fn score(&self, tokens: &[usize]) -> f64;
}

impl<F: Fn(&[usize]) -> f64 + Send + Sync> SentenceScorer for F {
    fn score(&self, tokens: &[usize]) -> f64 {
        self(tokens)
    }
}

/// Bag-of-words sentiment: `tanh(Σ w_t)` over a fixed lexicon.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexiconScorer {
    weights: HashMap<usize, f64>,
}

impl LexiconScorer {
    pub fn new(weights: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            weights: weights.into_iter().collect(),
        }
    }

    pub fn weight(&self, id: usize) -> f64 {
        self.weights.get(&id).copied().unwrap_or(0.0)
    }
}

impl SentenceScorer for LexiconScorer {
    fn score(&self, tokens: &[usize]) -> f64 {
        tokens.iter().map(|&t| self.weight(t)).sum::<f64>().tanh()
    }
}
