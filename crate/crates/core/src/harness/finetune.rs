use serde::{Deserialize, Serialize};

use super::vision::{c4_image, c4_invariant};
use super::HarnessError;
use crate::data::{gen_shapes, ShapeSplit};
use crate::diff::OptimizerKind;
use crate::group::{ActionKind, GroupAction};
use crate::models::{ShapeCnn, Trainable, CNN_FEATURE_DIM};
use crate::rng::substream;
use crate::wrap::{self, make_lambda_net, EquiConfig, Example, Lambda, ProxyKind, TrainOpts};

/// Which wrapper a model is evaluated or finetuned through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrapperMode {
    None,
    #[default]
    Equitune,
    Equizero,
    Lambda,
}

impl WrapperMode {
    pub fn name(self) -> &'static str {
        match self {
            WrapperMode::None => "none",
            WrapperMode::Equitune => "equitune",
            WrapperMode::Equizero => "equizero",
            WrapperMode::Lambda => "lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    /// Upright training images used for finetuning.
    pub examples: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch: 32,
            examples: 512,
        }
    }
}

pub struct FinetuneRun {
    pub model: ShapeCnn,
    /// The fitted λ-network, in lambda mode.
    pub config: EquiConfig,
    /// `(phase, loss)` per step; phase 1 trains λ, phase 2 the backbone.
    pub curve: Vec<(usize, f64)>,
}

/// The c4 wrapper for `mode` on the shape CNN; `none` is the trivial group.
pub fn wrapper_config(mode: WrapperMode, proxy: ProxyKind, seed: u64) -> Result<EquiConfig, HarnessError> {
    Ok(match mode {
        WrapperMode::None => {
            let one = GroupAction::cyclic(1, ActionKind::Trivial)?;
            EquiConfig::equitune(one.clone(), one)
        }
        WrapperMode::Equitune => EquiConfig::equitune(c4_image(), c4_invariant()),
        WrapperMode::Equizero => EquiConfig::equizero(c4_image(), c4_invariant(), proxy.into()),
        WrapperMode::Lambda => EquiConfig::lambda(
            c4_image(),
            c4_invariant(),
            Lambda::Net(make_lambda_net(CNN_FEATURE_DIM, &mut substream(seed, "finetune.lambda"))),
        ),
    })
}

pub fn finetune_data(n: usize, seed: u64) -> Vec<Example> {
    let d = gen_shapes(seed, n, ShapeSplit::Train);
    (0..d.len()).map(|i| Example::class(d.image(i), d.labels[i])).collect()
}

/// Finetunes `model` through the wrapper for `mode`: plain for equitune,
/// straight-through for equizero, and for λ first the λ-network with the
/// backbone frozen, then the backbone with λ frozen.
pub fn finetune(
    model: &ShapeCnn,
    mode: WrapperMode,
    proxy: ProxyKind,
    cfg: &FinetuneConfig,
    lambda_phase: &TrainOpts,
    seed: u64,
) -> Result<FinetuneRun, HarnessError> {
    let data = finetune_data(cfg.examples, seed);
    let mut c = wrapper_config(mode, proxy, seed)?;
    if mode == WrapperMode::Equizero {
        c = c.with_ste(true);
    }
    let mut curve = Vec::new();
    if mode == WrapperMode::Lambda {
        let report = wrap::train_lambda(model, &mut c, &data, &TrainOpts { seed, ..lambda_phase.clone() })?;
        curve.extend(report.losses.into_iter().map(|l| (1, l)));
    }
    let mut m = model.clone();
    let opts = TrainOpts {
        steps: cfg.steps,
        lr: cfg.lr,
        optimizer: cfg.optimizer,
        batch_size: cfg.batch,
        seed,
    };
    let report = wrap::finetune(&mut m, &c, &data, &opts)?;
    curve.extend(report.losses.into_iter().map(|l| (2, l)));
    Ok(FinetuneRun { model: m, config: c, curve })
}

/// Loads a shape-CNN checkpoint.
pub fn load_cnn(text: &str) -> Result<ShapeCnn, HarnessError> {
    let mut m = ShapeCnn::new(crate::data::SIDE, crate::data::NUM_CLASSES, &mut substream(0, "vision.init"));
    m.params_mut().load_checkpoint_json(text)?;
    Ok(m)
}
