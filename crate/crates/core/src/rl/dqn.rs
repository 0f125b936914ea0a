use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::Env;
use super::policy::greedy_act;
use crate::diff::{Optimizer, ParamMode, ParamStore, Tape, Tensor};
use crate::models::{Activation, Backbone, Mlp, ModelError, Trainable};
use crate::rng::{substream, StreamRng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error(transparent)]
    Wrap(#[from] crate::wrap::WrapError),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid DQN configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub steps: usize,
    pub buffer: usize,
    pub batch: usize,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the run over which ε decays linearly.
    pub eps_fraction: f64,
    pub target_every: usize,
    pub lr: f64,
    /// Environment steps before the first update.
    pub warmup: usize,
    /// Environment steps per gradient update.
    pub train_every: usize,
    pub hidden: usize,
    /// Environment steps between curve points.
    pub eval_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            buffer: 10_000,
            batch: 64,
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.5,
            target_every: 500,
            lr: 1e-4,
            warmup: 500,
            train_every: 4,
            hidden: 64,
            eval_every: 1000,
        }
    }
}

impl DqnConfig {
    pub fn epsilon(&self, step: usize) -> f64 {
        let span = (self.eps_fraction * self.steps as f64).max(1.0);
        let t = (step as f64 / span).min(1.0);
        self.eps_start + t * (self.eps_end - self.eps_start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean TD loss since the previous point (NaN before the first update).
    pub loss: f64,
    /// Mean return of completed training episodes since the previous point.
    pub eval_return: f64,
}

pub struct DqnRun {
    pub qnet: Mlp,
    pub curve: Vec<CurvePoint>,
}

/// Observation → Q-value MLP with two ReLU hidden layers.
pub fn q_network(obs_dim: usize, actions: usize, hidden: usize, rng: &mut StreamRng) -> Mlp {
    Mlp::new(&[obs_dim, hidden, hidden, actions], Activation::Relu, rng)
}

struct Transition {
    obs: Tensor,
    action: usize,
    reward: f64,
    next: Tensor,
    done: bool,
}

fn stack(items: &[&Tensor]) -> Tensor {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    Tensor::new(shape, items.iter().flat_map(|t| t.data().iter().copied()).collect()).expect("uniform observations")
}

/// Deep Q-learning with uniform replay, a periodically copied target network
/// and linearly decaying ε-greedy exploration.
pub fn dqn_train<E: Env>(env: &E, cfg: &DqnConfig, seed: u64) -> Result<DqnRun, RlError> {
    if cfg.batch == 0 || cfg.buffer < cfg.batch || cfg.train_every == 0 || cfg.target_every == 0 {
        return Err(RlError::Config("batch, buffer, train_every and target_every must be positive, buffer ≥ batch".into()));
    }
    let mut env = env.clone();
    let mut init = substream(seed, "dqn.init");
    let mut explore = substream(seed, "dqn.explore");
    let mut replay_rng = substream(seed, "dqn.replay");
    let mut starts = substream(seed, "dqn.starts");
    let obs_dim = env.observe().numel();
    let mut q = q_network(obs_dim, env.num_actions(), cfg.hidden, &mut init);
    let mut target: ParamStore = q.params().clone();
    let mut opt = Optimizer::adam(cfg.lr);
    let mut buffer: Vec<Transition> = Vec::with_capacity(cfg.buffer.min(cfg.steps));
    let mut cursor = 0;
    let mut curve = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let (mut ret_sum, mut ret_n, mut episode_return) = (0.0, 0usize, 0.0);
    env.reset(&mut starts);
    let mut obs = env.observe();
    for step in 0..cfg.steps {
        let action = if explore.gen::<f64>() < cfg.epsilon(step) {
            explore.gen_range(0..env.num_actions())
        } else {
            greedy_act(&q, &obs)?
        };
        let s = env.step(action);
        episode_return += s.reward;
        let next = env.observe();
        let t = Transition {
            obs: obs.clone(),
            action,
            reward: s.reward,
            next: next.clone(),
            done: s.done,
        };
        if buffer.len() < cfg.buffer {
            buffer.push(t);
        } else {
            buffer[cursor] = t;
            cursor = (cursor + 1) % cfg.buffer;
        }
        if s.done {
            ret_sum += episode_return;
            ret_n += 1;
            episode_return = 0.0;
            env.reset(&mut starts);
            obs = env.observe();
        } else {
            obs = next;
        }
        if step >= cfg.warmup && buffer.len() >= cfg.batch && step % cfg.train_every == 0 {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| replay_rng.gen_range(0..buffer.len())).collect();
            let batch: Vec<&Transition> = idx.iter().map(|&i| &buffer[i]).collect();
            let tape = Tape::new();
            let next_q = q
                .forward_batch_with(&target, &tape, tape.constant(stack(&batch.iter().map(|t| &t.next).collect::<Vec<_>>())), ParamMode::Frozen)?
                .output
                .value();
            let width = env.num_actions();
            let y: Vec<f64> = batch
                .iter()
                .enumerate()
                .map(|(r, t)| {
                    let best = next_q.data()[r * width..(r + 1) * width].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    t.reward + if t.done { 0.0 } else { cfg.gamma * best }
                })
                .collect();
            let x = tape.constant(stack(&batch.iter().map(|t| &t.obs).collect::<Vec<_>>()));
            let pred = q.forward_batch_with(q.params(), &tape, x, ParamMode::Train)?.output;
            let chosen = pred.pick(&batch.iter().map(|t| t.action).collect::<Vec<_>>())?;
            let loss = chosen.mse(tape.constant(Tensor::vector(y)))?;
            let l = loss.item();
            if !l.is_finite() {
                return Err(RlError::Diverged { step });
            }
            loss_sum += l;
            loss_n += 1;
            let grads = tape.backward(loss)?;
            let store = q.params_mut();
            store.zero_grad();
            store.accumulate(&grads);
            opt.step(store);
        }
        if (step + 1) % cfg.target_every == 0 {
            target.copy_from(q.params());
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            curve.push(CurvePoint {
                step: step + 1,
                loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
                eval_return: if ret_n > 0 { ret_sum / ret_n as f64 } else { f64::NAN },
            });
            (loss_sum, loss_n, ret_sum, ret_n) = (0.0, 0, 0.0, 0);
        }
    }
    Ok(DqnRun { qnet: q, curve })
}
