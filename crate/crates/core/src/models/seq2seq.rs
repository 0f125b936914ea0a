use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::diff::nn::{init_embedding, init_linear, linear, GatedCell};
use crate::diff::{softmax, ParamMode, ParamStore, Tape, Tensor, Var};
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub in_vocab: usize,
    /// Output symbols, not counting the start and end markers appended after them.
    pub out_symbols: usize,
    pub embed: usize,
    pub hidden: usize,
    pub max_len: usize,
}

/// Recurrent encoder-decoder. The decoder sees the previous output symbol
/// and the encoder summary at every step.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    store: ParamStore,
    cfg: Seq2SeqConfig,
    enc: GatedCell,
    dec: GatedCell,
}

/// Greedy decoding record: emitted symbols and the distribution each was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    pub dists: Vec<Vec<f64>>,
}

impl DecodeTrace {
    /// Mean over steps of `−max p`.
    pub fn neg_max_prob(&self) -> f64 {
        if self.dists.is_empty() {
            return 0.0;
        }
        let s: f64 = self.dists.iter().map(|d| -d.iter().cloned().fold(f64::MIN, f64::max)).sum();
        s / self.dists.len() as f64
    }
}

impl Seq2Seq {
    pub fn new(cfg: Seq2SeqConfig, rng: &mut StreamRng) -> Self {
        let mut store = ParamStore::new();
        let outs = cfg.out_symbols + 2;
        init_embedding(&mut store, "enc.emb", cfg.in_vocab, cfg.embed, rng);
        init_embedding(&mut store, "dec.emb", outs, cfg.embed, rng);
        let enc = GatedCell::new(&mut store, "enc.cell", cfg.embed, cfg.hidden, rng);
        let dec = GatedCell::new(&mut store, "dec.cell", cfg.embed + cfg.hidden, cfg.hidden, rng);
        init_linear(&mut store, "dec.out", cfg.hidden, outs, rng);
        Self { store, cfg, enc, dec }
    }

    pub fn config(&self) -> &Seq2SeqConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn sos(&self) -> usize {
        self.cfg.out_symbols
    }

    pub fn eos(&self) -> usize {
        self.cfg.out_symbols + 1
    }

    /// Size of the decoder's distribution (symbols plus markers).
    pub fn out_width(&self) -> usize {
        self.cfg.out_symbols + 2
    }

    pub fn encode<'t>(&self, store: &ParamStore, tape: &'t Tape, input: &[usize], mode: ParamMode) -> Result<Var<'t>, ModelError> {
        if input.iter().any(|&t| t >= self.cfg.in_vocab) {
            return Err(ModelError::Input {
                model: "seq2seq",
                detail: "input token out of vocabulary".into(),
            });
        }
        let emb = tape.param(store, "enc.emb", mode);
        let mut h = tape.constant(Tensor::zeros(&[self.cfg.hidden]));
        for &t in input {
            let x = emb.embed(&[t])?.flatten();
            h = self.enc.step(tape, store, x, h, mode)?;
        }
        Ok(h)
    }

    /// One decoder step: logits for the next symbol and the new state.
    pub fn step<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        ctx: Var<'t>,
        h: Var<'t>,
        prev: usize,
        mode: ParamMode,
    ) -> Result<(Var<'t>, Var<'t>), ModelError> {
        let e = tape.param(store, "dec.emb", mode).embed(&[prev])?.flatten();
        let x = tape.concat(&[e, ctx])?;
        let h = self.dec.step(tape, store, x, h, mode)?;
        let logits = linear(tape, store, "dec.out", h, mode)?;
        Ok((logits, h))
    }

    /// Mean cross-entropy of `target` followed by the end marker. With
    /// probability `teacher_forcing` the true symbol is fed back, otherwise the
    /// model's own argmax.
    pub fn loss<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        input: &[usize],
        target: &[usize],
        teacher_forcing: f64,
        rng: &mut StreamRng,
        mode: ParamMode,
    ) -> Result<Var<'t>, ModelError> {
        let ctx = self.encode(store, tape, input, mode)?;
        let mut h = ctx;
        let mut prev = self.sos();
        let mut rows = Vec::with_capacity(target.len() + 1);
        let gold: Vec<usize> = target.iter().copied().chain([self.eos()]).collect();
        for &y in &gold {
            let (logits, h2) = self.step(store, tape, ctx, h, prev, mode)?;
            h = h2;
            rows.push(logits);
            prev = if rng.gen::<f64>() < teacher_forcing {
                y
            } else {
                logits.value().argmax()
            };
        }
        let stacked = tape.concat(&rows)?.reshape(&[gold.len(), self.out_width()])?;
        Ok(stacked.cross_entropy(&gold)?)
    }

    pub fn greedy(&self, input: &[usize]) -> Result<DecodeTrace, ModelError> {
        let tape = Tape::new();
        let ctx = self.encode(&self.store, &tape, input, ParamMode::Frozen)?;
        let mut h = ctx;
        let mut prev = self.sos();
        let mut trace = DecodeTrace {
            tokens: Vec::new(),
            dists: Vec::new(),
        };
        for _ in 0..self.cfg.max_len {
            let (logits, h2) = self.step(&self.store, &tape, ctx, h, prev, ParamMode::Frozen)?;
            h = h2;
            let p = softmax(logits.value().data());
            let y = crate::diff::argmax(&p);
            trace.dists.push(p);
            if y == self.eos() {
                break;
            }
            trace.tokens.push(y);
            prev = y;
        }
        Ok(trace)
    }
}
