use serde::Serialize;

use super::scorer::SentenceScorer;
use super::SeqError;
use crate::group::GroupAction;

/// Equal-width buckets over `[-1, 1]`.
pub const SCORE_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FairnessReport {
    /// Per demographic, the fraction of sequences in each score bucket.
    pub histograms: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    /// Largest total-variation distance between two demographics' histograms.
    pub disparity: f64,
}

fn bucket(score: f64) -> usize {
    let s = score.clamp(-1.0, 1.0);
    (((s + 1.0) / 2.0 * SCORE_BINS as f64) as usize).min(SCORE_BINS - 1)
}

pub fn fairness_eval(per_demographic: &[Vec<Vec<usize>>], scorer: &dyn SentenceScorer) -> Result<FairnessReport, SeqError> {
    if per_demographic.is_empty() || per_demographic.iter().any(Vec::is_empty) {
        return Err(SeqError::Options("every demographic needs at least one sequence".into()));
    }
    let mut histograms = Vec::new();
    let mut means = Vec::new();
    for seqs in per_demographic {
        let mut h = vec![0.0; SCORE_BINS];
        let mut total = 0.0;
        for s in seqs {
            let v = scorer.score(s);
            h[bucket(v)] += 1.0 / seqs.len() as f64;
            total += v;
        }
        histograms.push(h);
        means.push(total / seqs.len() as f64);
    }
    let mut disparity: f64 = 0.0;
    for (i, a) in histograms.iter().enumerate() {
        for b in &histograms[i + 1..] {
            let tv = 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
            disparity = disparity.max(tv);
        }
    }
    Ok(FairnessReport {
        histograms,
        means,
        disparity,
    })
}

/// Sequences of demographic `k` come from contexts moved by `g^k`; map them
/// back by `g^{-k}` before scoring so every demographic is scored in one frame.
pub fn fairness_eval_normalized(
    per_demographic: &[Vec<Vec<usize>>],
    action: &GroupAction,
    scorer: &dyn SentenceScorer,
) -> Result<FairnessReport, SeqError> {
    let group = action.group();
    let normalized = per_demographic
        .iter()
        .enumerate()
        .map(|(k, seqs)| {
            let back = group.inverse(k % group.order());
            seqs.iter().map(|s| action.act_tokens(back, s)).collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    fairness_eval(&normalized, scorer)
}
