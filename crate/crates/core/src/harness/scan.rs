use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{gen_scan, ScanCorpus, ScanPair, ScanSplit, ACTION_WORDS, COMMAND_WORDS};
use crate::diff::{argmax, softmax, Optimizer, ParamMode, Tape, Var};
use crate::models::{Seq2Seq, Seq2SeqConfig};
use crate::rng::substream;
use crate::wrap::{argmin_first, ProxyKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub split: ScanSplit,
    pub embed: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub teacher_forcing: f64,
    pub proxy: ProxyKind,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            split: ScanSplit::AddJump,
            embed: 16,
            hidden: 48,
            steps: 1500,
            batch: 16,
            lr: 5e-3,
            teacher_forcing: 1.0,
            proxy: ProxyKind::NegMaxProb,
        }
    }
}

pub fn new_model(corpus: &ScanCorpus, cfg: &ScanConfig, seed: u64) -> Seq2Seq {
    Seq2Seq::new(
        Seq2SeqConfig {
            in_vocab: COMMAND_WORDS.len(),
            out_symbols: ACTION_WORDS.len(),
            embed: cfg.embed,
            hidden: cfg.hidden,
            max_len: corpus.max_output_len() + 1,
        },
        &mut substream(seed, "scan.init"),
    )
}

pub fn train_seq2seq(corpus: &ScanCorpus, cfg: &ScanConfig, seed: u64) -> Result<(Seq2Seq, Vec<f64>), HarnessError> {
    let mut model = new_model(corpus, cfg, seed);
    let mut order = substream(seed, "scan.batches");
    let mut tf = substream(seed, "scan.teacher");
    let mut opt = Optimizer::adam(cfg.lr);
    let mut idx: Vec<usize> = (0..corpus.train.len()).collect();
    let mut cursor = idx.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch {
            if cursor == idx.len() {
                idx.shuffle(&mut order);
                cursor = 0;
            }
            let p = &corpus.train[idx[cursor]];
            cursor += 1;
            let l = model.loss(model.params(), &tape, &p.input, &p.output, cfg.teacher_forcing, &mut tf, ParamMode::Train)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        let loss = total.expect("batch is non-empty").scale(1.0 / cfg.batch as f64);
        let l = loss.item();
        if !l.is_finite() {
            return Err(HarnessError::Diverged { step, loss: l });
        }
        curve.push(l);
        let grads = tape.backward(loss)?;
        let store = model.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(store);
    }
    Ok((model, curve))
}

pub fn decode_raw(m: &Seq2Seq, input: &[usize]) -> Result<Vec<usize>, HarnessError> {
    Ok(m.greedy(input)?.tokens)
}

/// Decodes every transformed command and keeps the branch whose trace has
/// the lowest proxy loss, mapped back by `g*⁻¹`.
pub fn decode_equizero(m: &Seq2Seq, split: ScanSplit, input: &[usize], proxy: ProxyKind) -> Result<(Vec<usize>, usize), HarnessError> {
    let (ia, oa) = (split.input_action(), split.output_action());
    let mut traces = Vec::new();
    for g in ia.group().elements() {
        traces.push(m.greedy(&ia.act_tokens(g, input)?)?);
    }
    let losses: Vec<f64> = traces
        .iter()
        .map(|t| match proxy {
            ProxyKind::Entropy => {
                let n = t.dists.len().max(1) as f64;
                t.dists.iter().map(|d| -d.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()).sum::<f64>() / n
            }
            _ => t.neg_max_prob(),
        })
        .collect();
    let g = argmin_first(&losses);
    Ok((oa.act_tokens(ia.group().inverse(g), &traces[g].tokens)?, g))
}

/// Sequential group averaging: one decoder per transformed command, run in
/// lockstep, each fed the chosen symbol in its own frame.
pub fn decode_equitune(m: &Seq2Seq, split: ScanSplit, input: &[usize]) -> Result<Vec<usize>, HarnessError> {
    let (ia, oa) = (split.input_action(), split.output_action());
    let group = ia.group();
    let tape = Tape::new();
    let store = m.params();
    let mut ctx = Vec::new();
    for g in group.elements() {
        ctx.push(m.encode(store, &tape, &ia.act_tokens(g, input)?, ParamMode::Frozen)?);
    }
    let mut h = ctx.clone();
    let mut prev = vec![m.sos(); group.order()];
    let width = m.out_width();
    let mut out = Vec::new();
    // marker symbols sit above the action ids and are fixed by the action
    let map = |g: usize, t: usize| if t < ACTION_WORDS.len() { oa.map_token(g, t) } else { Ok(t) };
    for _ in 0..m.config().max_len {
        let mut avg = vec![0.0; width];
        for g in group.elements() {
            let (logits, h2) = m.step(store, &tape, ctx[g], h[g], prev[g], ParamMode::Frozen)?;
            h[g] = h2;
            let p = softmax(logits.value().data());
            for (t, a) in avg.iter_mut().enumerate() {
                *a += p[map(g, t)?] / group.order() as f64;
            }
        }
        let y = argmax(&avg);
        if y == m.eos() {
            break;
        }
        out.push(y);
        for g in group.elements() {
            prev[g] = map(g, y)?;
        }
    }
    Ok(out)
}

fn exact(pairs: &[ScanPair], mut decode: impl FnMut(&[usize]) -> Result<Vec<usize>, HarnessError>) -> Result<f64, HarnessError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0;
    for p in pairs {
        if decode(&p.input)? == p.output {
            hit += 1;
        }
    }
    Ok(hit as f64 / pairs.len() as f64)
}

pub fn evaluate(m: &Seq2Seq, corpus: &ScanCorpus, cfg: &ScanConfig) -> Result<BTreeMap<String, f64>, HarnessError> {
    let split = corpus.split;
    let mut out = BTreeMap::new();
    out.insert("val_accuracy".into(), exact(&corpus.val, |x| decode_raw(m, x))?);
    out.insert("raw_test_accuracy".into(), exact(&corpus.test, |x| decode_raw(m, x))?);
    out.insert("equitune_test_accuracy".into(), exact(&corpus.test, |x| decode_equitune(m, split, x))?);
    out.insert(
        "equizero_test_accuracy".into(),
        exact(&corpus.test, |x| Ok(decode_equizero(m, split, x, cfg.proxy)?.0))?,
    );
    Ok(out)
}

pub fn run_seed(cfg: &ScanConfig, seed: u64) -> Result<BTreeMap<String, f64>, HarnessError> {
    let corpus = gen_scan(cfg.split, seed);
    let (m, curve) = train_seq2seq(&corpus, cfg, seed)?;
    let mut out = evaluate(&m, &corpus, cfg)?;
    out.insert("train_loss".into(), curve.last().copied().unwrap_or(f64::NAN));
    Ok(out)
}
