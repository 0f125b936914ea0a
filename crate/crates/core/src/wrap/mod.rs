//! Equivariant wrappers around an arbitrary backbone `M`.
//!
//! * equitune: `(1/|G|) Σ_g g⁻¹ M(g x)`
//! * equizero: `g*⁻¹ M(g* x)` with `g* = argmin_g l(M(g x))`
//! * λ-equitune: `Σ_g g⁻¹ λ(g x) M(g x) / Σ_g λ(g x)`
//!
//! Each wrapper evaluates the backbone once per group element. Inputs are
//! transformed by the config's input action and outputs are mapped back with
//! the inverse element under the output action.

mod lambda;
mod log;
mod objective;
mod proxy;
mod train;
mod universality;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, ParamMode, Tape, Tensor, Var};
use crate::group::{ActionError, GroupAction, Point};
use crate::models::{Backbone, ModelError};

pub use lambda::{make_lambda_net, Lambda, LambdaNet, LAMBDA_FLOOR, LAMBDA_HIDDEN};
pub use log::GStarLog;
pub use objective::{symmetrization_objective, symmetrization_objective_literal};
pub use proxy::{entropy, neg_max_prob, neg_max_softmax_q, ProxyKind, ProxyLoss};
pub use train::{finetune, train_lambda, Example, FinetuneReport, Target, TrainOpts};
pub use universality::{universality_config, universality_curve, universality_fit, UniversalityFixture, UniversalityPoint};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WrapError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("equizero needs a proxy loss")]
    MissingProxy,
    #[error("λ-equitune needs a λ")]
    MissingLambda,
    #[error("proxy loss is NaN for element {g}")]
    NanLoss { g: usize },
    #[error("proxy loss of an empty output")]
    EmptyOutput,
    #[error("λ weight {value} for element {g} is not a non-negative number")]
    BadWeight { g: usize, value: f64 },
    #[error("λ weights sum to zero")]
    ZeroDenominator,
    #[error("invalid wrapper configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Equitune,
    Equizero,
    Lambda,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Equitune => "equitune",
            Mode::Equizero => "equizero",
            Mode::Lambda => "lambda",
        }
    }
}

/// What a λ-network reads for each transformed input.
#[derive(Clone)]
pub enum FeatureSource {
    /// The backbone's own feature from the same pass; gradients reach the
    /// backbone when it is trainable.
    Live,
    /// The backbone's feature with gradients blocked.
    Detached,
    /// A separate frozen encoder.
    Encoder(Arc<dyn Backbone>),
}

impl std::fmt::Debug for FeatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureSource::Live => f.write_str("Live"),
            FeatureSource::Detached => f.write_str("Detached"),
            FeatureSource::Encoder(e) => write!(f, "Encoder({})", e.describe()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EquiConfig {
    pub input: GroupAction,
    pub output: GroupAction,
    pub mode: Mode,
    pub proxy: Option<ProxyLoss>,
    pub lambda: Option<Lambda>,
    pub features: FeatureSource,
    /// Equizero only: backpropagate through the equitune output instead.
    pub ste: bool,
}

impl EquiConfig {
    pub fn equitune(input: GroupAction, output: GroupAction) -> Self {
        Self {
            input,
            output,
            mode: Mode::Equitune,
            proxy: None,
            lambda: None,
            features: FeatureSource::Detached,
            ste: false,
        }
    }

    pub fn equizero(input: GroupAction, output: GroupAction, proxy: ProxyLoss) -> Self {
        Self {
            mode: Mode::Equizero,
            proxy: Some(proxy),
            ..Self::equitune(input, output)
        }
    }

    pub fn lambda(input: GroupAction, output: GroupAction, lambda: Lambda) -> Self {
        Self {
            mode: Mode::Lambda,
            lambda: Some(lambda),
            ..Self::equitune(input, output)
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_ste(mut self, ste: bool) -> Self {
        self.ste = ste;
        self
    }

    pub fn with_features(mut self, features: FeatureSource) -> Self {
        self.features = features;
        self
    }

    pub fn with_proxy(mut self, proxy: ProxyLoss) -> Self {
        self.proxy = Some(proxy);
        self
    }

    pub fn with_lambda(mut self, lambda: Lambda) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn order(&self) -> usize {
        self.input.group().order()
    }

    pub fn validate(&self) -> Result<(), WrapError> {
        if self.input.group() != self.output.group() {
            return Err(WrapError::Config("input and output actions use different groups".into()));
        }
        match self.mode {
            Mode::Equizero if self.proxy.is_none() => Err(WrapError::MissingProxy),
            Mode::Lambda if self.lambda.is_none() => Err(WrapError::MissingLambda),
            _ => Ok(()),
        }
    }
}

/// Which parameter sets receive gradients during a wrapped pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modes {
    pub backbone: ParamMode,
    pub lambda: ParamMode,
}

impl Modes {
    pub const FROZEN: Modes = Modes {
        backbone: ParamMode::Frozen,
        lambda: ParamMode::Frozen,
    };
    pub const BACKBONE: Modes = Modes {
        backbone: ParamMode::Train,
        lambda: ParamMode::Frozen,
    };
    pub const LAMBDA: Modes = Modes {
        backbone: ParamMode::Frozen,
        lambda: ParamMode::Train,
    };
    pub const ALL: Modes = Modes {
        backbone: ParamMode::Train,
        lambda: ParamMode::Train,
    };
}

/// Wrapped output plus per-row diagnostics. Single inputs have one row.
#[derive(Clone, Debug)]
pub struct WrapOutput<'t> {
    pub output: Var<'t>,
    /// Equizero's chosen element per row.
    pub g_star: Vec<usize>,
    /// Equizero's proxy loss per row and element.
    pub losses: Vec<Vec<f64>>,
    /// λ weight per row and element.
    pub weights: Vec<Vec<f64>>,
    /// Equitune's output, set for equizero with the straight-through estimator.
    pub surrogate: Option<Var<'t>>,
}

enum Input<'a> {
    One(&'a Point),
    Batch(&'a Tensor),
}

impl Input<'_> {
    fn rows(&self) -> usize {
        match self {
            Input::One(_) => 1,
            Input::Batch(t) => t.shape()[0],
        }
    }
}

enum Transformed {
    One(Point),
    Batch(Tensor),
}

impl Transformed {
    /// Flattened transformed input of row `r`.
    fn row(&self, r: usize) -> Vec<f64> {
        match self {
            Transformed::One(Point::Real(t)) => t.data().to_vec(),
            Transformed::One(Point::Tokens(ids)) => ids.iter().map(|&i| i as f64).collect(),
            Transformed::Batch(t) => {
                let w = t.numel() / t.shape()[0];
                t.data()[r * w..(r + 1) * w].to_vec()
            }
        }
    }
}

struct Branch<'t> {
    input: Transformed,
    raw: Var<'t>,
    feature: Var<'t>,
    /// `g⁻¹ · M(g x)`
    back: Var<'t>,
}

fn branches<'t>(m: &dyn Backbone, c: &EquiConfig, tape: &'t Tape, x: &Input, mode: ParamMode) -> Result<Vec<Branch<'t>>, WrapError> {
    let group = c.input.group();
    group
        .elements()
        .map(|g| {
            let (input, f) = match x {
                Input::One(p) => {
                    let gx = c.input.act(g, p)?;
                    let f = m.forward(tape, &gx, mode)?;
                    (Transformed::One(gx), f)
                }
                Input::Batch(t) => {
                    let gx = c.input.act_tensor(g, t)?;
                    let f = m.forward_batch_with(m.params(), tape, tape.constant(gx.clone()), mode)?;
                    (Transformed::Batch(gx), f)
                }
            };
            let back = c.output.act_var(group.inverse(g), f.output)?;
            Ok(Branch {
                input,
                raw: f.output,
                feature: f.feature,
                back,
            })
        })
        .collect()
}

fn sum_vars<'t>(vs: impl IntoIterator<Item = Var<'t>>) -> Result<Var<'t>, DiffError> {
    let mut it = vs.into_iter();
    let first = it.next().ok_or(DiffError::EmptyAxis)?;
    it.try_fold(first, |acc, v| acc.add(v))
}

fn equitune_combine<'t>(bs: &[Branch<'t>]) -> Result<Var<'t>, DiffError> {
    Ok(sum_vars(bs.iter().map(|b| b.back))?.scale(1.0 / bs.len() as f64))
}

/// Row-weight tensor shaped to broadcast against outputs with `rank` axes.
fn column(rows: usize, values: Vec<f64>, batched: bool, rank: usize) -> Tensor {
    if !batched {
        return Tensor::vector(values);
    }
    let mut shape = vec![rows];
    shape.resize(rank.max(2), 1);
    Tensor::new(shape, values).expect("shape")
}

fn row_values(v: &Tensor, rows: usize) -> Vec<&[f64]> {
    let w = v.numel() / rows.max(1);
    (0..rows).map(|r| &v.data()[r * w..(r + 1) * w]).collect()
}

fn proxy_losses(c: &EquiConfig, bs: &[Branch<'_>], rows: usize) -> Result<Vec<Vec<f64>>, WrapError> {
    let proxy = c.proxy.as_ref().ok_or(WrapError::MissingProxy)?;
    let values: Vec<Tensor> = bs.iter().map(|b| b.raw.value()).collect();
    let mut losses = vec![Vec::with_capacity(bs.len()); rows];
    for (g, v) in values.iter().enumerate() {
        for (r, row) in row_values(v, rows).into_iter().enumerate() {
            let l = proxy.evaluate(row)?;
            if l.is_nan() {
                return Err(WrapError::NanLoss { g });
            }
            losses[r].push(l);
        }
    }
    Ok(losses)
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn lambda_weights<'t>(
    c: &EquiConfig,
    bs: &[Branch<'t>],
    tape: &'t Tape,
    rows: usize,
    batched: bool,
    lambda_mode: ParamMode,
) -> Result<(Vec<Var<'t>>, Vec<Vec<f64>>), WrapError> {
    let lambda = c.lambda.as_ref().ok_or(WrapError::MissingLambda)?;
    let rank = bs[0].back.shape().len();
    let mut vars = Vec::with_capacity(bs.len());
    for (g, b) in bs.iter().enumerate() {
        let w = match lambda {
            Lambda::Net(net) => {
                let feature = match &c.features {
                    FeatureSource::Live => b.feature,
                    FeatureSource::Detached => b.feature.detach(),
                    FeatureSource::Encoder(e) => match &b.input {
                        Transformed::One(p) => e.forward(tape, p, ParamMode::Frozen)?.feature,
                        Transformed::Batch(t) => {
                            e.forward_batch_with(e.params(), tape, tape.constant(t.clone()), ParamMode::Frozen)?
                                .feature
                        }
                    },
                };
                let w = net.forward(tape, feature, lambda_mode)?;
                if batched {
                    let mut shape = vec![rows];
                    shape.resize(rank.max(2), 1);
                    w.reshape(&shape)?
                } else {
                    w
                }
            }
            Lambda::Fixed(f) => {
                let vals = (0..rows).map(|r| f(g, &b.input.row(r))).collect();
                tape.constant(column(rows, vals, batched, rank))
            }
        };
        vars.push(w);
    }
    let mut weights = vec![Vec::with_capacity(bs.len()); rows];
    for (g, w) in vars.iter().enumerate() {
        for (r, &v) in w.data().iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(WrapError::BadWeight { g, value: v });
            }
            weights[r].push(v);
        }
    }
    if weights.iter().any(|row| row.iter().sum::<f64>() <= 0.0) {
        return Err(WrapError::ZeroDenominator);
    }
    Ok((vars, weights))
}

fn run<'t>(m: &dyn Backbone, c: &EquiConfig, tape: &'t Tape, x: Input, modes: Modes) -> Result<WrapOutput<'t>, WrapError> {
    c.validate()?;
    let rows = x.rows();
    let batched = matches!(x, Input::Batch(_));
    let bs = branches(m, c, tape, &x, modes.backbone)?;
    let mut out = WrapOutput {
        output: bs[0].back,
        g_star: Vec::new(),
        losses: Vec::new(),
        weights: Vec::new(),
        surrogate: None,
    };
    match c.mode {
        Mode::Equitune => out.output = equitune_combine(&bs)?,
        Mode::Equizero => {
            let losses = proxy_losses(c, &bs, rows)?;
            let g_star: Vec<usize> = losses.iter().map(|l| argmin_first(l)).collect();
            let selected = if batched {
                let rank = bs[0].back.shape().len();
                let terms = bs
                    .iter()
                    .enumerate()
                    .map(|(g, b)| {
                        let mask = g_star.iter().map(|&s| if s == g { 1.0 } else { 0.0 }).collect();
                        b.back.mul(tape.constant(column(rows, mask, true, rank)))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                sum_vars(terms)?
            } else {
                bs[g_star[0]].back
            };
            out.output = if c.ste {
                // M_G + detach(M0 − M_G), arranged so the value is M0 exactly
                let surrogate = equitune_combine(&bs)?;
                out.surrogate = Some(surrogate);
                surrogate.sub(surrogate.detach())?.add(selected.detach())?
            } else {
                selected
            };
            out.g_star = g_star;
            out.losses = losses;
        }
        Mode::Lambda => {
            let (ws, weights) = lambda_weights(c, &bs, tape, rows, batched, modes.lambda)?;
            let num = sum_vars(
                bs.iter()
                    .zip(&ws)
                    .map(|(b, &w)| b.back.mul(w))
                    .collect::<Result<Vec<_>, _>>()?,
            )?;
            let den = sum_vars(ws.iter().copied())?;
            out.output = num.div(den)?;
            out.weights = weights;
        }
    }
    Ok(out)
}

/// Wrapped pass for one input, dispatching on `c.mode`.
pub fn forward<'t>(m: &dyn Backbone, c: &EquiConfig, tape: &'t Tape, x: &Point, modes: Modes) -> Result<WrapOutput<'t>, WrapError> {
    run(m, c, tape, Input::One(x), modes)
}

/// Wrapped pass over a batch `[N, ...]`; the actions must act on the
/// trailing axes and the backbone must support batches.
pub fn forward_batch<'t>(m: &dyn Backbone, c: &EquiConfig, tape: &'t Tape, x: &Tensor, modes: Modes) -> Result<WrapOutput<'t>, WrapError> {
    if x.shape().is_empty() || x.shape()[0] == 0 {
        return Err(WrapError::Config("batch needs a non-empty leading axis".into()));
    }
    run(m, c, tape, Input::Batch(x), modes)
}

fn require(c: &EquiConfig, mode: Mode) -> Result<(), WrapError> {
    if c.mode != mode {
        return Err(WrapError::Config(format!("config is in {} mode, not {}", c.mode.name(), mode.name())));
    }
    Ok(())
}

pub fn equitune_forward<'t>(m: &dyn Backbone, c: &EquiConfig, tape: &'t Tape, x: &Point, modes: Modes) -> Result<Var<'t>, WrapError> {
    require(c, Mode::Equitune)?;
    Ok(forward(m, c, tape, x, modes)?.output)
}

/// Returns the output and the chosen element `g*`.
pub fn equizero_forward<'t>(
    m: &dyn Backbone,
    c: &EquiConfig,
    tape: &'t Tape,
    x: &Point,
    modes: Modes,
) -> Result<(Var<'t>, usize), WrapError> {
    require(c, Mode::Equizero)?;
    let out = forward(m, c, tape, x, modes)?;
    Ok((out.output, out.g_star[0]))
}

pub fn lambda_equitune_forward<'t>(m: &dyn Backbone, c: &EquiConfig, tape: &'t Tape, x: &Point, modes: Modes) -> Result<Var<'t>, WrapError> {
    require(c, Mode::Lambda)?;
    Ok(forward(m, c, tape, x, modes)?.output)
}

/// Output value of the wrapped model.
pub fn predict(m: &dyn Backbone, c: &EquiConfig, x: &Point) -> Result<Tensor, WrapError> {
    let tape = Tape::new();
    Ok(forward(m, c, &tape, x, Modes::FROZEN)?.output.value())
}

pub fn predict_batch(m: &dyn Backbone, c: &EquiConfig, x: &Tensor) -> Result<Tensor, WrapError> {
    let tape = Tape::new();
    Ok(forward_batch(m, c, &tape, x, Modes::FROZEN)?.output.value())
}

#[cfg(test)]
mod tests;
