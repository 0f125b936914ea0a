use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SeqError;
use crate::diff::nn::{init_embedding, init_linear, linear, GatedCell};
use crate::diff::{softmax, Optimizer, ParamMode, ParamStore, Tape, Tensor, Var};
use crate::group::Point;
use crate::models::{Backbone, Forward, ModelError, Trainable};
use crate::rng::{substream, StreamRng};

/// Next-token distributions over a fixed vocabulary.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn max_context(&self) -> usize;
    /// `p(· | context)`.
    fn next_distribution(&self, context: &[usize]) -> Result<Vec<f64>, SeqError>;

    fn check_context(&self, context: &[usize]) -> Result<(), SeqError> {
        if context.len() > self.max_context() {
            return Err(SeqError::ContextTooLong {
                len: context.len(),
                max: self.max_context(),
            });
        }
        if let Some(&t) = context.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(SeqError::TokenOutOfRange {
                token: t,
                vocab: self.vocab_size(),
            });
        }
        Ok(())
    }
}

/// A language model given by a closure returning logits.
#[derive(Clone)]
pub struct FnLm {
    vocab: usize,
    max_context: usize,
    logits: Arc<dyn Fn(&[usize]) -> Vec<f64> + Send + Sync>,
}

impl FnLm {
    pub fn new(vocab: usize, max_context: usize, logits: impl Fn(&[usize]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self {
            vocab,
            max_context,
            logits: Arc::new(logits),
        }
    }
}

impl LanguageModel for FnLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn next_distribution(&self, context: &[usize]) -> Result<Vec<f64>, SeqError> {
        self.check_context(context)?;
        let l = (self.logits)(context);
        if l.len() != self.vocab {
            return Err(SeqError::Width {
                got: l.len(),
                want: self.vocab,
            });
        }
        Ok(softmax(&l))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLmConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub max_context: usize,
}

/// Embedding → gated recurrent cell → logits over the vocabulary.
#[derive(Clone, Debug)]
pub struct ToyLM {
    store: ParamStore,
    cfg: ToyLmConfig,
    cell: GatedCell,
}

impl ToyLM {
    pub fn new(cfg: ToyLmConfig, rng: &mut StreamRng) -> Self {
        let mut store = ParamStore::new();
        init_embedding(&mut store, "lm.emb", cfg.vocab, cfg.embed, rng);
        let cell = GatedCell::new(&mut store, "lm.cell", cfg.embed, cfg.hidden, rng);
        init_linear(&mut store, "lm.out", cfg.hidden, cfg.vocab, rng);
        Self { store, cfg, cell }
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    /// Hidden states after each prefix `tokens[..=i]`, starting from zero.
    fn states<'t>(&self, store: &ParamStore, tape: &'t Tape, tokens: &[usize], mode: ParamMode) -> Result<Vec<Var<'t>>, SeqError> {
        self.check_context(tokens)?;
        let emb = tape.param(store, "lm.emb", mode);
        let mut h = tape.constant(Tensor::zeros(&[self.cfg.hidden]));
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            h = self.cell.step(tape, store, emb.embed(&[t])?.flatten(), h, mode)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Mean next-token cross-entropy over one sentence.
    pub fn sentence_loss<'t>(&self, store: &ParamStore, tape: &'t Tape, tokens: &[usize], mode: ParamMode) -> Result<Var<'t>, SeqError> {
        if tokens.len() < 2 {
            return Err(SeqError::Options("training sentences need at least two tokens".into()));
        }
        let states = self.states(store, tape, &tokens[..tokens.len() - 1], mode)?;
        let rows = states
            .into_iter()
            .map(|h| linear(tape, store, "lm.out", h, mode))
            .collect::<Result<Vec<_>, _>>()?;
        let stacked = tape.concat(&rows)?.reshape(&[rows.len(), self.cfg.vocab])?;
        Ok(stacked.cross_entropy(&tokens[1..])?)
    }
}

impl LanguageModel for ToyLM {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn max_context(&self) -> usize {
        self.cfg.max_context
    }

    fn next_distribution(&self, context: &[usize]) -> Result<Vec<f64>, SeqError> {
        self.check_context(context)?;
        Ok(softmax(self.predict(&Point::Tokens(context.to_vec()))?.data()))
    }
}

impl Backbone for ToyLM {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Logits for the token after the context; the feature is the last state.
    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let ids = x.as_tokens().ok_or_else(|| ModelError::Input {
            model: "toy_lm",
            detail: "expects a token sequence".into(),
        })?;
        let states = self.states(store, tape, ids, mode).map_err(|e| match e {
            SeqError::Diff(d) => ModelError::Diff(d),
            other => ModelError::Input {
                model: "toy_lm",
                detail: other.to_string(),
            },
        })?;
        let h = states.last().copied().unwrap_or_else(|| tape.constant(Tensor::zeros(&[self.cfg.hidden])));
        Ok(Forward {
            output: linear(tape, store, "lm.out", h, mode)?,
            feature: h,
        })
    }

    fn describe(&self) -> String {
        format!("toy_lm(vocab={}, hidden={})", self.cfg.vocab, self.cfg.hidden)
    }
}

impl Trainable for ToyLM {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for LmTrainOpts {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 16,
            lr: 1e-2,
        }
    }
}

/// Adam on uniformly sampled sentences; returns the per-step mean loss.
pub fn train_lm(lm: &mut ToyLM, corpus: &[Vec<usize>], opts: &LmTrainOpts, seed: u64) -> Result<Vec<f64>, SeqError> {
    if corpus.is_empty() || opts.batch == 0 {
        return Err(SeqError::Options("empty corpus or zero batch".into()));
    }
    let mut rng = substream(seed, "lm.batches");
    let mut opt = Optimizer::adam(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let tape = Tape::new();
        let mut total: Option<Var> = None;
        for _ in 0..opts.batch {
            let s = &corpus[rng.gen_range(0..corpus.len())];
            let l = lm.sentence_loss(lm.params(), &tape, s, ParamMode::Train)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        let loss = total.expect("batch is non-empty").scale(1.0 / opts.batch as f64);
        losses.push(loss.item());
        let grads = tape.backward(loss)?;
        let store = lm.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(store);
    }
    Ok(losses)
}
