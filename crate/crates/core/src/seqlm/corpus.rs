use rand::seq::SliceRandom;
use rand::Rng;

use super::scorer::LexiconScorer;
use super::words::{Vocab, WordSetsDoc};
use crate::rng::substream;

pub const POSITIVE_WORDS: [&str; 6] = ["kind", "smart", "brilliant", "good", "caring", "honest"];
pub const NEGATIVE_WORDS: [&str; 6] = ["rude", "lazy", "cruel", "bad", "dishonest", "careless"];
const DEMOGRAPHIC: [[&str; 2]; 4] = [["man", "woman"], ["he", "she"], ["his", "her"], ["boy", "girl"]];
const OCCUPATIONS: [&str; 6] = ["doctor", "engineer", "chef", "nurse", "teacher", "worker"];
const FUNCTION: [&str; 13] = ["the", "a", "was", "is", "known", "for", "being", "very", "and", "worked", "as", "friends", "."];

/// Bundled toy vocabulary, a biased training corpus and the sentiment scorer.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub vocab: Vocab,
    pub sentences: Vec<Vec<usize>>,
    pub scorer: LexiconScorer,
}

/// `[[man, woman], [he, she], [his, her], [boy, girl]]` with occupations as
/// neutral words.
pub fn toy_word_sets() -> WordSetsDoc {
    WordSetsDoc {
        equality: DEMOGRAPHIC.iter().map(|t| t.iter().map(|w| w.to_string()).collect()).collect(),
        neutral: OCCUPATIONS.iter().chain(&POSITIVE_WORDS).chain(&NEGATIVE_WORDS).map(|w| w.to_string()).collect(),
        d: 2,
    }
}

/// `n` template sentences in which the first demographic is described
/// positively with probability `bias` and the second with `1 − bias`.
pub fn toy_corpus(n: usize, bias: f64, seed: u64) -> ToyCorpus {
    let words: Vec<&str> = DEMOGRAPHIC
        .iter()
        .flatten()
        .chain(&OCCUPATIONS)
        .chain(&POSITIVE_WORDS)
        .chain(&NEGATIVE_WORDS)
        .chain(&FUNCTION)
        .copied()
        .collect();
    let vocab = Vocab::new(&words).expect("bundled words are distinct");
    let scorer = LexiconScorer::new(
        POSITIVE_WORDS
            .iter()
            .map(|w| (vocab.id(w).expect("bundled"), 1.0))
            .chain(NEGATIVE_WORDS.iter().map(|w| (vocab.id(w).expect("bundled"), -1.0))),
    );
    let mut rng = substream(seed, "seqlm.corpus");
    let mut sentences = Vec::with_capacity(n);
    for _ in 0..n {
        let side = rng.gen_range(0..2);
        let positive = rng.gen::<f64>() < if side == 0 { bias } else { 1.0 - bias };
        let adj = *if positive { &POSITIVE_WORDS } else { &NEGATIVE_WORDS }.choose(&mut rng).expect("non-empty");
        let noun = if rng.gen::<bool>() { DEMOGRAPHIC[0][side] } else { DEMOGRAPHIC[3][side] };
        let pron = DEMOGRAPHIC[1][side];
        let occ = OCCUPATIONS[side * 3 + rng.gen_range(0..3)];
        let text = match rng.gen_range(0..4) {
            0 => format!("the {noun} was known for being {adj} ."),
            1 => format!("the {noun} worked as a {occ} and {pron} was {adj} ."),
            2 => format!("{pron} was very {adj} and {} friends was {adj} .", DEMOGRAPHIC[2][side]),
            _ => format!("the {noun} is a {adj} {occ} ."),
        };
        sentences.push(vocab.encode(&text).expect("template words are in the vocabulary"));
    }
    ToyCorpus { vocab, sentences, scorer }
}
