use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{gen_shapes, ShapeDataset, ShapeSplit, NUM_CLASSES, SIDE};
use crate::diff::{argmax, Optimizer, ParamMode, Tape, Tensor};
use crate::group::{ActionKind, GroupAction};
use crate::models::{Backbone, ShapeCnn, SoftmaxHead, Trainable, CNN_FEATURE_DIM};
use crate::rng::substream;
use crate::wrap::{self, make_lambda_net, EquiConfig, Example, Lambda, ProxyLoss, TrainOpts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Mass spread uniformly over the classes in the training targets.
    pub label_smoothing: f64,
    /// Upright training images used to fit the λ-network.
    pub lambda_examples: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            train_size: 1600,
            test_size: 400,
            steps: 400,
            batch: 32,
            lr: 3e-3,
            label_smoothing: 0.2,
            lambda_examples: 256,
        }
    }
}

pub fn c4_image() -> GroupAction {
    GroupAction::cyclic(4, ActionKind::Rot90Image).expect("c4 on images")
}

pub fn c4_invariant() -> GroupAction {
    GroupAction::cyclic(4, ActionKind::Trivial).expect("c4 trivial")
}

/// Plain Adam on upright images; returns the model and the loss curve.
pub fn pretrain_cnn(cfg: &VisionConfig, seed: u64) -> Result<(ShapeCnn, Vec<f64>), HarnessError> {
    let train = gen_shapes(seed, cfg.train_size, ShapeSplit::Train);
    let mut model = ShapeCnn::new(SIDE, NUM_CLASSES, &mut substream(seed, "vision.init"));
    let mut order = substream(seed, "vision.batches");
    let mut opt = Optimizer::adam(cfg.lr);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut cursor = idx.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut pick = Vec::with_capacity(cfg.batch);
        while pick.len() < cfg.batch {
            if cursor == idx.len() {
                idx.shuffle(&mut order);
                cursor = 0;
            }
            pick.push(idx[cursor]);
            cursor += 1;
        }
        let x = gather(&train, &pick);
        let labels: Vec<usize> = pick.iter().map(|&i| train.labels[i]).collect();
        let tape = Tape::new();
        let out = model.forward_batch(&tape, tape.constant(x), ParamMode::Train)?.output;
        let ce = out.cross_entropy(&labels)?;
        let ls = cfg.label_smoothing;
        let loss = if ls > 0.0 { ce.scale(1.0 - ls).add(out.log_softmax()?.mean().scale(-ls))? } else { ce };
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

fn gather(d: &ShapeDataset, idx: &[usize]) -> Tensor {
    let w = SIDE * SIDE;
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&d.images.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(vec![idx.len(), 1, SIDE, SIDE], data).expect("batch shape")
}

const EVAL_CHUNK: usize = 100;

pub fn accuracy(model: &dyn Backbone, cfg: Option<&EquiConfig>, data: &ShapeDataset) -> Result<f64, HarnessError> {
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let x = data.batch(start..end);
        let logits = match cfg {
            Some(c) => wrap::predict_batch(model, c, &x)?,
            None => {
                let tape = Tape::new();
                model.forward_batch_with(model.params(), &tape, tape.constant(x), ParamMode::Frozen)?.output.value()
            }
        };
        let k = logits.shape()[1];
        correct += (start..end)
            .filter(|&i| argmax(&logits.data()[(i - start) * k..(i - start + 1) * k]) == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// λ-network fitted on upright training images with the backbone frozen.
pub fn fit_lambda(model: &dyn Backbone, cfg: &VisionConfig, phase: &TrainOpts, seed: u64) -> Result<EquiConfig, HarnessError> {
    let train = gen_shapes(seed, cfg.train_size, ShapeSplit::Train);
    let net = make_lambda_net(CNN_FEATURE_DIM, &mut substream(seed, "vision.lambda"));
    let mut c = EquiConfig::lambda(c4_image(), c4_invariant(), Lambda::Net(net));
    let n = cfg.lambda_examples.min(train.len());
    let data: Vec<Example> = (0..n).map(|i| Example::class(train.image(i), train.labels[i])).collect();
    let opts = TrainOpts { seed, ..phase.clone() };
    wrap::train_lambda(model, &mut c, &data, &opts)?;
    Ok(c)
}

/// Pretrains on upright images and scores every wrapper on the upright and
/// rotated test splits.
pub fn run_seed(cfg: &VisionConfig, phase: &TrainOpts, seed: u64) -> Result<BTreeMap<String, f64>, HarnessError> {
    let (model, curve) = pretrain_cnn(cfg, seed)?;
    evaluate(&model, cfg, phase, seed, curve.last().copied())
}

pub fn evaluate(model: &ShapeCnn, cfg: &VisionConfig, phase: &TrainOpts, seed: u64, train_loss: Option<f64>) -> Result<BTreeMap<String, f64>, HarnessError> {
    let upright = gen_shapes(seed, cfg.test_size, ShapeSplit::TestUpright);
    let rotated = gen_shapes(seed, cfg.test_size, ShapeSplit::TestRot90);
    let mut m = BTreeMap::new();
    if let Some(l) = train_loss {
        m.insert("train_loss".to_string(), l);
    }
    // equitune averages class probabilities; λ is fitted with cross-entropy on
    // the wrapped output so it stays on logits, as does equizero's proxy
    let probs = SoftmaxHead::new(model.clone());
    let wrappers: Vec<(&str, &dyn Backbone, EquiConfig)> = vec![
        ("equitune", &probs, EquiConfig::equitune(c4_image(), c4_invariant())),
        ("equizero_entropy", model, EquiConfig::equizero(c4_image(), c4_invariant(), ProxyLoss::Entropy)),
        ("equizero_neg_max_prob", model, EquiConfig::equizero(c4_image(), c4_invariant(), ProxyLoss::NegMaxProb)),
        ("lambda", model, fit_lambda(model, cfg, phase, seed)?),
    ];
    let raw_up = accuracy(model, None, &upright)?;
    let raw_rot = accuracy(model, None, &rotated)?;
    m.insert("accuracy_upright".to_string(), raw_up);
    m.insert("accuracy_rot90".to_string(), raw_rot);
    for (name, b, c) in &wrappers {
        m.insert(format!("{name}_upright"), accuracy(*b, Some(c), &upright)?);
        m.insert(format!("{name}_rot90"), accuracy(*b, Some(c), &rotated)?);
    }
    let drop = raw_up - raw_rot;
    for name in ["equitune", "lambda"] {
        let rec = if drop > 0.0 { (m[&format!("{name}_rot90")] - raw_rot) / drop } else { 0.0 };
        m.insert(format!("{name}_recovered"), rec);
    }
    m.insert("drop".to_string(), drop);
    Ok(m)
}
