use std::sync::Arc;

use rand::Rng;

use nalgebra::{DMatrix, DVector};

use super::{forward_batch, predict_batch, EquiConfig, Lambda, Modes, WrapError};

use crate::diff::{Optimizer, ParamMode, Tape, Tensor};
use crate::group::{ActionKind, GroupAction};
use crate::models::{Activation, Backbone, Mlp, Trainable};
use crate::rng::{normal, substream};

type TargetFn = Arc<dyn Fn(&[f64; 2]) -> [f64; 2] + Send + Sync>;

/// An equivariant target on the box `[lo, hi]²` with the group acting on both
/// input and output coordinates.
#[derive(Clone)]
pub struct UniversalityFixture {
    pub name: &'static str,
    pub action: GroupAction,
    pub lo: f64,
    pub hi: f64,
    /// Points per side of the evaluation grid.
    pub grid: usize,
    pub tolerance: f64,
    pub activation: Activation,
    /// Initial Adam learning rate, decayed tenfold over the run.
    pub lr: f64,
    /// Solve the last layer in closed form before each evaluation.
    pub refit: bool,
    target: TargetFn,
}

impl std::fmt::Debug for UniversalityFixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "UniversalityFixture({}, [{}, {}]²)", self.name, self.lo, self.hi)
    }
}

fn plane(t: &Tensor) -> [f64; 2] {
    [t.data()[0], t.data()[1]]
}

impl UniversalityFixture {
    /// `f(x) = A x` under Z2 negation.
    pub fn linear_negation(seed: u64) -> Self {
        let mut rng = substream(seed, "fixture.linear");
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            name: "linear_negation",
            action: GroupAction::cyclic(2, ActionKind::Negate).expect("Z2 negation"),
            lo: -1.0,
            hi: 1.0,
            grid: 21,
            tolerance: 1e-3,
            activation: Activation::Tanh,
            lr: 1e-2,
            refit: true,
            target: Arc::new(move |x| [a[0] * x[0] + a[1] * x[1], a[2] * x[0] + a[3] * x[1]]),
        }
    }

    /// A random cubic `p: R² -> R²` symmetrized over Z4 rotations of the
    /// plane: `f(x) = (1/4) Σ_g g⁻¹ p(g x)`.
    pub fn symmetrized_cubic(seed: u64) -> Self {
        let mut rng = substream(seed, "fixture.cubic");
        // coefficients of the 10 monomials x^i y^j with i + j ≤ 3, per output
        let coef: Vec<f64> = (0..20).map(|_| 0.5 * normal(&mut rng)).collect();
        let action = GroupAction::cyclic(4, ActionKind::PlaneRot90).expect("Z4 rotation");
        let act = action.clone();
        let p = move |x: [f64; 2]| {
            let mut out = [0.0; 2];
            let mut k = 0;
            for i in 0..=3 {
                for j in 0..=(3 - i) {
                    let m = x[0].powi(i) * x[1].powi(j as i32);
                    out[0] += coef[k] * m;
                    out[1] += coef[10 + k] * m;
                    k += 1;
                }
            }
            out
        };
        let target = move |x: &[f64; 2]| {
            let g = act.group();
            let mut acc = [0.0; 2];
            for e in g.elements() {
                let gx = plane(&act.act_tensor(e, &Tensor::vector(x.to_vec())).expect("plane point"));
                let y = Tensor::vector(p(gx).to_vec());
                let back = plane(&act.act_tensor(g.inverse(e), &y).expect("plane point"));
                acc[0] += back[0] / 4.0;
                acc[1] += back[1] / 4.0;
            }
            acc
        };
        Self {
            name: "symmetrized_cubic",
            action,
            lo: -1.0,
            hi: 1.0,
            grid: 21,
            tolerance: 0.05,
            activation: Activation::Tanh,
            lr: 1e-2,
            refit: false,
            target: Arc::new(target),
        }
    }

    pub fn target(&self, x: &[f64; 2]) -> [f64; 2] {
        (self.target)(x)
    }

    /// Row-major grid over the box, `[grid², 2]`.
    pub fn grid_points(&self) -> Tensor {
        let n = self.grid.max(2);
        let step = (self.hi - self.lo) / (n - 1) as f64;
        let data = (0..n)
            .flat_map(|i| (0..n).flat_map(move |j| [self.lo + i as f64 * step, self.lo + j as f64 * step]))
            .collect();
        Tensor::new(vec![n * n, 2], data).expect("grid shape")
    }

    fn targets(&self, xs: &Tensor) -> Tensor {
        let data = xs.data().chunks(2).flat_map(|p| self.target(&[p[0], p[1]])).collect();
        Tensor::new(xs.shape().to_vec(), data).expect("target shape")
    }

    /// Largest `‖f(gx) − g f(x)‖∞` over the grid.
    pub fn target_equivariance_error(&self) -> f64 {
        let xs = self.grid_points();
        let fx = self.targets(&xs);
        let mut worst: f64 = 0.0;
        for g in self.action.group().elements() {
            let gx = self.action.act_tensor(g, &xs).expect("grid");
            let lhs = self.targets(&gx);
            let rhs = self.action.act_tensor(g, &fx).expect("grid");
            worst = worst.max(lhs.max_abs_diff(&rhs));
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniversalityPoint {
    pub steps: usize,
    /// Sup error against the target over the grid.
    pub sup_error: f64,
    /// Largest `‖wrap(gx) − g·wrap(x)‖∞` over the grid.
    pub equivariance_error: f64,
}

/// Wrapper config used by the fit: the fixture's action on both sides and a
/// fixed positive λ that depends only on the transformed point.
pub fn universality_config(fixture: &UniversalityFixture, seed: u64) -> EquiConfig {
    let mut rng = substream(seed, "fixture.lambda");
    let w = [normal(&mut rng), normal(&mut rng)];
    let b = normal(&mut rng);
    let lambda = Lambda::fixed(move |_, z| 1.0 + 0.5 * (w[0] * z[0] + w[1] * z[1] + b).sin());
    EquiConfig::lambda(fixture.action.clone(), fixture.action.clone(), lambda)
}

/// Trains an MLP `2→64→64→2` under λ-equitune with a fixed random λ to
/// regress the fixture's target, recording the grid errors after each budget
/// (budgets are cumulative Adam steps and must increase). The learning rate
/// decays tenfold over the whole run.
pub fn universality_curve(fixture: &UniversalityFixture, budgets: &[usize], seed: u64) -> Result<Vec<UniversalityPoint>, WrapError> {
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(WrapError::Config("budgets must increase".into()));
    }
    let c = universality_config(fixture, seed);
    let mut init = substream(seed, "fixture.init");
    let mut m = Mlp::new(&[2, 64, 64, 2], fixture.activation, &mut init);
    let mut rng = substream(seed, "fixture.samples");
    let mut opt = Optimizer::adam(fixture.lr);
    let grid = fixture.grid_points();
    let grid_targets = fixture.targets(&grid);
    let train_x = Tensor::new(vec![512, 2], (0..1024).map(|_| rng.gen_range(fixture.lo..=fixture.hi)).collect())?;
    let train_y = fixture.targets(&train_x);
    let total = budgets.last().copied().unwrap_or(0);
    let mut points = Vec::with_capacity(budgets.len());
    let mut next = 0;
    for step in 1..=total {
        opt.set_lr(fixture.lr * 0.1f64.powf(step as f64 / total.max(1) as f64));
        let xs = Tensor::new(vec![128, 2], (0..256).map(|_| rng.gen_range(fixture.lo..=fixture.hi)).collect())?;
        let ys = fixture.targets(&xs);
        let tape = Tape::new();
        let out = forward_batch(&m, &c, &tape, &xs, Modes::BACKBONE)?.output;
        let loss = out.mse(tape.constant(ys))?;
        let grads = tape.backward(loss)?;
        let store = m.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(store);
        if next < budgets.len() && step == budgets[next] {
            points.push(checkpoint(&m, &c, fixture, &train_x, &train_y, &grid, &grid_targets, step)?);
            next += 1;
        }
    }
    while next < budgets.len() {
        points.push(checkpoint(&m, &c, fixture, &train_x, &train_y, &grid, &grid_targets, budgets[next])?);
        next += 1;
    }
    Ok(points)
}

#[allow(clippy::too_many_arguments)]
fn checkpoint(
    m: &Mlp,
    c: &EquiConfig,
    fixture: &UniversalityFixture,
    xs: &Tensor,
    ys: &Tensor,
    grid: &Tensor,
    targets: &Tensor,
    steps: usize,
) -> Result<UniversalityPoint, WrapError> {
    let mut fitted = m.clone();
    if fixture.refit {
        refit_readout(&mut fitted, c, xs, ys)?;
    }
    evaluate(&fitted, c, fixture, grid, targets, steps)
}

/// Replaces the last layer of `m` by the least-squares optimum of
/// `‖wrap(x) − y‖²` over the samples. The wrapped output is linear in the
/// last layer, so this is an exact solve given the hidden features.
pub fn refit_readout(m: &mut Mlp, c: &EquiConfig, xs: &Tensor, ys: &Tensor) -> Result<(), WrapError> {
    let sizes = m.sizes().to_vec();
    let (hidden, out) = (sizes[sizes.len() - 2], sizes[sizes.len() - 1]);
    let last = sizes.len() - 2;
    let rows = xs.shape()[0];
    let group = c.input.group();
    let tape = Tape::new();
    let weights = forward_batch(&*m, c, &tape, xs, Modes::FROZEN)?.weights;
    // column j of the output action's matrix for each inverse element
    let mats: Vec<Vec<Vec<f64>>> = group
        .elements()
        .map(|g| {
            (0..out)
                .map(|j| {
                    let mut e = vec![0.0; out];
                    e[j] = 1.0;
                    Ok(c.output.act_tensor(group.inverse(g), &Tensor::vector(e))?.into_data())
                })
                .collect::<Result<Vec<_>, WrapError>>()
        })
        .collect::<Result<_, _>>()?;
    let feats: Vec<Tensor> = group
        .elements()
        .map(|g| {
            let gx = c.input.act_tensor(g, xs)?;
            let t = Tape::new();
            Ok(m.forward_batch_with(m.params(), &t, t.constant(gx), ParamMode::Frozen)?.feature.value())
        })
        .collect::<Result<_, WrapError>>()?;
    let unknowns = hidden * out + out;
    let mut a = DMatrix::<f64>::zeros(rows * out, unknowns);
    let mut b = DVector::<f64>::zeros(rows * out);
    for r in 0..rows {
        let total: f64 = weights[r].iter().sum();
        for k in 0..out {
            let row = r * out + k;
            b[row] = ys.data()[r * out + k];
            for g in group.elements() {
                let w = weights[r][g] / total;
                let h = &feats[g].data()[r * hidden..(r + 1) * hidden];
                for j in 0..out {
                    let p = w * mats[g][j][k];
                    if p == 0.0 {
                        continue;
                    }
                    for (i, hv) in h.iter().enumerate() {
                        a[(row, i * out + j)] += p * hv;
                    }
                    a[(row, hidden * out + j)] += p;
                }
            }
        }
    }
    let theta = a
        .svd(true, true)
        .solve(&b, 1e-10)
        .map_err(|e| WrapError::Config(format!("readout solve: {e}")))?;
    let store = m.params_mut();
    let wi = store.index_of(&format!("l{last}.w")).expect("mlp layer");
    store.value_at_mut(wi).data_mut().copy_from_slice(&theta.as_slice()[..hidden * out]);
    let bi = store.index_of(&format!("l{last}.b")).expect("mlp layer");
    store.value_at_mut(bi).data_mut().copy_from_slice(&theta.as_slice()[hidden * out..]);
    Ok(())
}

fn evaluate(
    m: &dyn Backbone,
    c: &EquiConfig,
    fixture: &UniversalityFixture,
    grid: &Tensor,
    targets: &Tensor,
    steps: usize,
) -> Result<UniversalityPoint, WrapError> {
    let pred = predict_batch(m, c, grid)?;
    let mut eq: f64 = 0.0;
    for g in fixture.action.group().elements() {
        let lhs = predict_batch(m, c, &fixture.action.act_tensor(g, grid)?)?;
        let rhs = fixture.action.act_tensor(g, &pred)?;
        eq = eq.max(lhs.max_abs_diff(&rhs));
    }
    Ok(UniversalityPoint {
        steps,
        sup_error: pred.max_abs_diff(targets),
        equivariance_error: eq,
    })
}

/// Sup error on the fixture's grid after `budget` training steps.
pub fn universality_fit(fixture: &UniversalityFixture, budget: usize, seed: u64) -> Result<UniversalityPoint, WrapError> {
    Ok(universality_curve(fixture, &[budget], seed)?.remove(0))
}
