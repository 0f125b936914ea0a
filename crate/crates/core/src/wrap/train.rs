use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{forward, forward_batch, EquiConfig, FeatureSource, Lambda, Mode, Modes, WrapError};
use crate::diff::{Optimizer, OptimizerKind, ParamMode, Tape, Tensor, Var};
use crate::group::Point;
use crate::models::{Backbone, Trainable};
use crate::rng::{substream, StreamRng};

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Point,
    pub target: Target,
}

impl Example {
    pub fn class(input: impl Into<Point>, label: usize) -> Self {
        Self {
            input: input.into(),
            target: Target::Class(label),
        }
    }

    pub fn value(input: impl Into<Point>, target: Tensor) -> Self {
        Self {
            input: input.into(),
            target: Target::Value(target),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Examples per step; the whole set when at least its size.
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainOpts {
    /// Defaults for training a λ-network with the backbone frozen.
    pub fn lambda_phase() -> Self {
        Self {
            steps: 1000,
            lr: 0.3,
            optimizer: OptimizerKind::Sgd,
            batch_size: 64,
            seed: 0,
        }
    }

    /// Defaults for finetuning a backbone through a wrapper.
    pub fn finetune() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    /// Mean batch loss at every step, before the update.
    pub losses: Vec<f64>,
}

impl FinetuneReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn batch_indices(n: usize, size: usize, rng: &mut StreamRng) -> Vec<usize> {
    if size >= n {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, size).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Stacks real inputs of one shape along a new leading axis.
pub(crate) fn stack(points: &[&Point]) -> Option<Tensor> {
    let first = points.first()?.as_real()?;
    let mut data = Vec::with_capacity(first.numel() * points.len());
    for p in points {
        let t = p.as_real()?;
        if t.shape() != first.shape() {
            return None;
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![points.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data).ok()
}

/// Mean loss of `[B, ...]` outputs against the batch targets.
pub(crate) fn batch_loss<'t>(tape: &'t Tape, out: Var<'t>, targets: &[&Target]) -> Result<Var<'t>, WrapError> {
    let rows = targets.len();
    if let Some(labels) = targets
        .iter()
        .map(|t| match t {
            Target::Class(c) => Some(*c),
            Target::Value(_) => None,
        })
        .collect::<Option<Vec<_>>>()
    {
        let width = out.numel() / rows.max(1);
        return Ok(out.reshape(&[rows, width])?.cross_entropy(&labels)?);
    }
    let mut data = Vec::with_capacity(out.numel());
    for t in targets {
        match t {
            Target::Value(v) => data.extend_from_slice(v.data()),
            Target::Class(_) => return Err(WrapError::Config("mixed class and value targets".into())),
        }
    }
    let target = Tensor::new(out.shape(), data)?;
    Ok(out.mse(tape.constant(target))?)
}

fn check_finite(step: usize, loss: f64) -> Result<(), WrapError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(WrapError::Diverged { step, loss })
    }
}

/// Per-example, per-element cache of `g⁻¹·m(gx)` and the λ feature of `gx`.
struct Cache {
    backs: Vec<Vec<Vec<f64>>>,
    feats: Vec<Vec<Vec<f64>>>,
    out_shape: Vec<usize>,
}

fn feature_model<'a>(m: &'a dyn Backbone, c: &'a EquiConfig) -> &'a dyn Backbone {
    match &c.features {
        FeatureSource::Encoder(e) => e.as_ref(),
        _ => m,
    }
}

fn build_cache(m: &dyn Backbone, c: &EquiConfig, data: &[Example]) -> Result<Cache, WrapError> {
    let group = c.input.group();
    let n = group.order();
    let fm = feature_model(m, c);
    let mut backs = vec![Vec::with_capacity(n); data.len()];
    let mut feats = vec![Vec::with_capacity(n); data.len()];
    let mut out_shape = Vec::new();
    let points: Vec<&Point> = data.iter().map(|e| &e.input).collect();
    let batched = m.supports_batch() && fm.supports_batch() && stack(&points).is_some();
    for g in group.elements() {
        let inv = group.inverse(g);
        if batched {
            for (chunk_start, chunk) in points.chunks(64).enumerate().map(|(k, ch)| (k * 64, ch)) {
                let x = c.input.act_tensor(g, &stack(chunk).expect("stackable"))?;
                let tape = Tape::new();
                let f = m.forward_batch_with(m.params(), &tape, tape.constant(x.clone()), ParamMode::Frozen)?;
                let back = c.output.act_var(inv, f.output)?.value();
                let feat = if !matches!(c.features, FeatureSource::Encoder(_)) {
                    f.feature.value()
                } else {
                    fm.forward_batch_with(fm.params(), &tape, tape.constant(x), ParamMode::Frozen)?.feature.value()
                };
                out_shape = back.shape()[1..].to_vec();
                let bw = back.numel() / chunk.len();
                let fw = feat.numel() / chunk.len();
                for r in 0..chunk.len() {
                    backs[chunk_start + r].push(back.data()[r * bw..(r + 1) * bw].to_vec());
                    feats[chunk_start + r].push(feat.data()[r * fw..(r + 1) * fw].to_vec());
                }
            }
        } else {
            for (i, p) in points.iter().enumerate() {
                let gx = c.input.act(g, p)?;
                let tape = Tape::new();
                let f = m.forward(&tape, &gx, ParamMode::Frozen)?;
                let back = c.output.act_var(inv, f.output)?.value();
                let feat = match &c.features {
                    FeatureSource::Encoder(e) => e.forward(&tape, &gx, ParamMode::Frozen)?.feature.value(),
                    _ => f.feature.value(),
                };
                out_shape = back.shape().to_vec();
                backs[i].push(back.into_data());
                feats[i].push(feat.into_data());
            }
        }
    }
    Ok(Cache { backs, feats, out_shape })
}

/// Trains the λ-network of `c` with the backbone frozen. Branch outputs and
/// features are computed once and reused at every step.
pub fn train_lambda(m: &dyn Backbone, c: &mut EquiConfig, data: &[Example], opts: &TrainOpts) -> Result<FinetuneReport, WrapError> {
    if c.mode != Mode::Lambda {
        return Err(WrapError::Config("λ training needs lambda mode".into()));
    }
    if data.is_empty() {
        return Err(WrapError::Config("no training examples".into()));
    }
    if !matches!(c.lambda, Some(Lambda::Net(_))) {
        return Err(WrapError::Config("λ training needs a λ-network".into()));
    }
    let cache = build_cache(m, c, data)?;
    let net = c.lambda.as_mut().and_then(Lambda::net_mut).expect("checked above");
    let order = cache.backs[0].len();
    let mut opt = Optimizer::new(opts.optimizer, opts.lr);
    let mut rng = substream(opts.seed, "lambda.batches");
    let mut report = FinetuneReport::default();
    for step in 0..opts.steps {
        let idx = batch_indices(data.len(), opts.batch_size, &mut rng);
        let b = idx.len();
        let tape = Tape::new();
        let mut num: Option<Var> = None;
        let mut den: Option<Var> = None;
        for g in 0..order {
            let fdim = cache.feats[idx[0]][g].len();
            let feat = Tensor::new(vec![b, fdim], idx.iter().flat_map(|&i| cache.feats[i][g].iter().copied()).collect())?;
            let mut shape = vec![b];
            shape.extend_from_slice(&cache.out_shape);
            let back = Tensor::new(shape.clone(), idx.iter().flat_map(|&i| cache.backs[i][g].iter().copied()).collect())?;
            let mut wshape = vec![b];
            wshape.resize(shape.len().max(2), 1);
            let w = net.forward(&tape, tape.constant(feat), ParamMode::Train)?.reshape(&wshape)?;
            let term = tape.constant(back).mul(w)?;
            num = Some(match num {
                Some(acc) => acc.add(term)?,
                None => term,
            });
            den = Some(match den {
                Some(acc) => acc.add(w)?,
                None => w,
            });
        }
        let out = num.expect("non-empty group").div(den.expect("non-empty group"))?;
        let targets: Vec<&Target> = idx.iter().map(|&i| &data[i].target).collect();
        let loss = batch_loss(&tape, out, &targets)?;
        check_finite(step, loss.item())?;
        report.losses.push(loss.item());
        let grads = tape.backward(loss)?;
        let store = net.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(store);
    }
    Ok(report)
}

/// Value of `loss`, gradient of `surrogate`.
fn through<'t>(loss: Var<'t>, surrogate: Var<'t>) -> Result<Var<'t>, WrapError> {
    Ok(surrogate.sub(surrogate.detach())?.add(loss.detach())?)
}

/// Finetunes the backbone through the wrapper of `c` (λ-network frozen).
/// Equizero finetuning with `c.ste` reports the equizero loss but steps
/// along the gradient of the equitune loss.
pub fn finetune<M: Trainable>(m: &mut M, c: &EquiConfig, data: &[Example], opts: &TrainOpts) -> Result<FinetuneReport, WrapError> {
    c.validate()?;
    if data.is_empty() {
        return Err(WrapError::Config("no training examples".into()));
    }
    let points: Vec<&Point> = data.iter().map(|e| &e.input).collect();
    let batched = m.supports_batch() && stack(&points).is_some();
    let mut opt = Optimizer::new(opts.optimizer, opts.lr);
    let mut rng = substream(opts.seed, "finetune.batches");
    let mut report = FinetuneReport::default();
    for step in 0..opts.steps {
        let idx = batch_indices(data.len(), opts.batch_size, &mut rng);
        let targets: Vec<&Target> = idx.iter().map(|&i| &data[i].target).collect();
        let tape = Tape::new();
        let loss = if batched {
            let x = stack(&idx.iter().map(|&i| points[i]).collect::<Vec<_>>()).expect("stackable");
            let w = forward_batch(&*m, c, &tape, &x, Modes::BACKBONE)?;
            let loss = batch_loss(&tape, w.output, &targets)?;
            match w.surrogate {
                Some(s) => through(loss, batch_loss(&tape, s, &targets)?)?,
                None => loss,
            }
        } else {
            let mut total: Option<Var> = None;
            for (&i, t) in idx.iter().zip(&targets) {
                let w = forward(&*m, c, &tape, points[i], Modes::BACKBONE)?;
                let mut l = batch_loss(&tape, w.output.reshape(&[1, w.output.numel()])?, &[t])?;
                if let Some(s) = w.surrogate {
                    l = through(l, batch_loss(&tape, s.reshape(&[1, s.numel()])?, &[t])?)?;
                }
                total = Some(match total {
                    Some(acc) => acc.add(l)?,
                    None => l,
                });
            }
            total.expect("non-empty batch").scale(1.0 / idx.len() as f64)
        };
        check_finite(step, loss.item())?;
        report.losses.push(loss.item());
        let grads = tape.backward(loss)?;
        let store = m.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(store);
    }
    Ok(report)
}
