use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lm::LanguageModel;
use super::scorer::SentenceScorer;
use super::SeqError;
use crate::diff::{argmax, Tensor};
use crate::group::GroupAction;
use crate::rng::{substream, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenOptions {
    /// Tokens generated per branch before each selection round.
    pub beam: usize,
    pub total_tokens: usize,
    /// Draw tokens instead of taking the argmax.
    pub sample: bool,
    pub temperature: f64,
    pub seed: u64,
    /// Words whose probability is taken from the untransformed context only
    /// when averaging (the relaxed variant). Empty for strict averaging.
    pub general: Vec<usize>,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            total_tokens: 10,
            sample: false,
            temperature: 1.0,
            seed: 0,
            general: Vec::new(),
        }
    }
}

impl GenOptions {
    fn validate(&self) -> Result<(), SeqError> {
        if self.beam == 0 {
            return Err(SeqError::Options("beam length must be at least 1".into()));
        }
        if self.sample && !(self.temperature > 0.0) {
            return Err(SeqError::Options("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One selection round, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub g_star: usize,
    pub scores: Vec<f64>,
    /// Tokens appended this round, in the caller's frame.
    pub tokens: Vec<usize>,
}

/// Which branch produced a token and the log-probability it was given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub position: usize,
    pub branch: usize,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens only, without the context.
    pub tokens: Vec<usize>,
    pub rounds: Vec<RoundLog>,
    pub steps: Vec<StepLog>,
    pub log_prob: f64,
}

impl Generation {
    pub fn g_star_trace(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.g_star).collect()
    }

    pub fn to_json_lines(&self) -> String {
        self.rounds.iter().map(|r| serde_json::to_string(r).expect("round serializes") + "\n").collect()
    }
}

fn choose(p: &[f64], opts: &GenOptions, rng: &mut StreamRng) -> usize {
    if !opts.sample {
        return argmax(p);
    }
    let w: Vec<f64> = p.iter().map(|&q| q.powf(1.0 / opts.temperature)).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &v) in w.iter().enumerate() {
        if u < v {
            return i;
        }
        u -= v;
    }
    argmax(p)
}

/// Extends `context` by `n` tokens; returns the tokens and their log-probabilities.
fn rollout(lm: &dyn LanguageModel, context: &[usize], n: usize, opts: &GenOptions, rng: &mut StreamRng) -> Result<(Vec<usize>, Vec<f64>), SeqError> {
    let mut ctx = context.to_vec();
    let mut lps = Vec::with_capacity(n);
    for _ in 0..n {
        let p = lm.next_distribution(&ctx)?;
        let t = choose(&p, opts, rng);
        lps.push(p[t].ln());
        ctx.push(t);
    }
    Ok((ctx[context.len()..].to_vec(), lps))
}

pub fn greedy_generate(lm: &dyn LanguageModel, context: &[usize], opts: &GenOptions) -> Result<Generation, SeqError> {
    opts.validate()?;
    let mut rng = substream(opts.seed, "seqlm.sample");
    let (tokens, lps) = rollout(lm, context, opts.total_tokens, opts, &mut rng)?;
    Ok(Generation {
        steps: lps
            .iter()
            .enumerate()
            .map(|(i, &lp)| StepLog {
                position: context.len() + i,
                branch: 0,
                log_prob: lp,
            })
            .collect(),
        log_prob: lps.iter().sum(),
        rounds: Vec::new(),
        tokens,
    })
}

/// Sequential equizero decoding. Each round extends every transformed
/// context `gX` by `beam` tokens, scores the full sentences, keeps the best
/// branch `g*` (ties: larger summed log-probability, then lower index) and
/// continues from `g*⁻¹ Y_{g*}`.
pub fn equizero_generate(
    lm: &dyn LanguageModel,
    action: &GroupAction,
    scorer: &dyn SentenceScorer,
    context: &[usize],
    opts: &GenOptions,
) -> Result<Generation, SeqError> {
    opts.validate()?;
    let mut rng = substream(opts.seed, "seqlm.sample");
    let group = action.group();
    let mut x = context.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        rounds: Vec::new(),
        steps: Vec::new(),
        log_prob: 0.0,
    };
    while out.tokens.len() < opts.total_tokens {
        let m = opts.beam.min(opts.total_tokens - out.tokens.len());
        let mut branches = Vec::with_capacity(group.order());
        for g in group.elements() {
            let xg = action.act_tokens(g, &x)?;
            let (toks, lps) = rollout(lm, &xg, m, opts, &mut rng)?;
            let mut y = xg;
            y.extend_from_slice(&toks);
            branches.push((scorer.score(&y), lps.iter().sum::<f64>(), toks, lps));
        }
        let mut best = 0;
        for (g, b) in branches.iter().enumerate().skip(1) {
            let cur = &branches[best];
            if b.0 > cur.0 || (b.0 == cur.0 && b.1 > cur.1) {
                best = g;
            }
        }
        let (_, lp, toks, lps) = &branches[best];
        let emitted = action.act_tokens(group.inverse(best), toks)?;
        for (i, &l) in lps.iter().enumerate() {
            out.steps.push(StepLog {
                position: x.len() + i,
                branch: best,
                log_prob: l,
            });
        }
        out.log_prob += lp;
        out.rounds.push(RoundLog {
            round: out.rounds.len(),
            g_star: best,
            scores: branches.iter().map(|b| b.0).collect(),
            tokens: emitted.clone(),
        });
        x.extend_from_slice(&emitted);
        out.tokens.extend(emitted);
    }
    Ok(out)
}

/// `(1/|G|) Σ_g g⁻¹·p(·|gX)`, with `general` words read from the identity
/// branch and the result renormalized.
pub fn averaged_distribution(lm: &dyn LanguageModel, action: &GroupAction, context: &[usize], general: &[usize]) -> Result<Vec<f64>, SeqError> {
    let group = action.group();
    let v = lm.vocab_size();
    let mut avg = vec![0.0; v];
    let mut identity = Vec::new();
    for g in group.elements() {
        let p = lm.next_distribution(&action.act_tokens(g, context)?)?;
        if g == group.identity() {
            identity = p.clone();
        }
        let back = action.act_tensor(group.inverse(g), &Tensor::vector(p))?;
        for (a, b) in avg.iter_mut().zip(back.data()) {
            *a += b / group.order() as f64;
        }
    }
    if !general.is_empty() {
        for &t in general {
            avg[t] = identity[t];
        }
        let z: f64 = avg.iter().sum();
        avg.iter_mut().for_each(|a| *a /= z);
    }
    Ok(avg)
}

/// Token-by-token group-averaged decoding.
pub fn equitune_generate(lm: &dyn LanguageModel, action: &GroupAction, context: &[usize], opts: &GenOptions) -> Result<Generation, SeqError> {
    opts.validate()?;
    let mut rng = substream(opts.seed, "seqlm.sample");
    let mut x = context.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        rounds: Vec::new(),
        steps: Vec::new(),
        log_prob: 0.0,
    };
    for _ in 0..opts.total_tokens {
        let p = averaged_distribution(lm, action, &x, &opts.general)?;
        let t = choose(&p, opts, &mut rng);
        out.steps.push(StepLog {
            position: x.len(),
            branch: 0,
            log_prob: p[t].ln(),
        });
        out.log_prob += p[t].ln();
        out.tokens.push(t);
        x.push(t);
    }
    Ok(out)
}
