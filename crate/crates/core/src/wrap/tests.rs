use std::sync::Arc;

use rand::Rng;

use super::*;
use crate::diff::{grad_check, ParamStore};
use crate::group::ActionKind;
use crate::models::{AffineModel, Activation, Forward, Mlp, TokenMlp, Trainable};
use crate::rng::{normal, substream, StreamRng};

fn randn(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).unwrap()
}

fn action(n: usize, kind: ActionKind) -> GroupAction {
    GroupAction::cyclic(n, kind).unwrap()
}

/// Returns its input unchanged.
struct Echo(ParamStore);

impl Backbone for Echo {
    fn params(&self) -> &ParamStore {
        &self.0
    }

    fn forward_with<'t>(&self, _: &ParamStore, tape: &'t Tape, x: &Point, _: ParamMode) -> Result<Forward<'t>, ModelError> {
        let v = tape.constant(x.as_real().unwrap().clone());
        Ok(Forward { output: v, feature: v })
    }

    fn describe(&self) -> String {
        "echo".into()
    }
}

fn first_entry() -> ProxyLoss {
    ProxyLoss::Custom(Arc::new(|v: &[f64]| v[0]))
}

#[test]
fn equitune_cancels_affine_offset_under_negation() {
    let a = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let m = AffineModel::from_parts(a, Tensor::vector(vec![0.7, -1.1]));
    let neg = action(2, ActionKind::Negate);
    let c = EquiConfig::equitune(neg.clone(), neg);
    let y = predict(&m, &c, &Point::Real(Tensor::vector(vec![2.0, 1.0]))).unwrap();
    assert!((y.data()[0] - 0.0).abs() < 1e-15 && (y.data()[1] - 4.0).abs() < 1e-15, "{y:?}");
}

#[test]
fn equitune_with_trivial_output_averages_transformed_inputs() {
    let mut rng = substream(10, "t");
    let m = Mlp::random(&[16, 8, 3], Activation::Tanh, &mut rng);
    let rot = action(4, ActionKind::Rot90Image);
    let c = EquiConfig::equitune(rot.clone(), action(4, ActionKind::Trivial));
    let x = Point::Real(randn(&[4, 4], &mut rng));
    let y = predict(&m, &c, &x).unwrap();
    let mut avg = [0.0; 3];
    for g in 0..4 {
        let o = m.predict(&rot.act(g, &x).unwrap()).unwrap();
        for k in 0..3 {
            avg[k] += o.data()[k] / 4.0;
        }
    }
    for k in 0..3 {
        assert!((avg[k] - y.data()[k]).abs() < 1e-15);
    }
}

struct Case {
    name: &'static str,
    model: Box<dyn Backbone>,
    input: GroupAction,
    output: GroupAction,
    feature_dim: usize,
    sample: Box<dyn Fn(&mut StreamRng) -> Point>,
}

fn cases(rng: &mut StreamRng) -> Vec<Case> {
    let image = |side: usize| move |r: &mut StreamRng| Point::Real(randn(&[side, side], r));
    let vector = |d: usize| move |r: &mut StreamRng| Point::Real(randn(&[d], r));
    vec![
        Case {
            name: "rot90/rot90",
            model: Box::new(Mlp::random(&[16, 12, 16], Activation::Tanh, rng).with_out_shape(&[4, 4])),
            input: action(4, ActionKind::Rot90Image),
            output: action(4, ActionKind::Rot90Image),
            feature_dim: 12,
            sample: Box::new(image(4)),
        },
        Case {
            name: "rot90/trivial",
            model: Box::new(Mlp::random(&[16, 12, 5], Activation::Tanh, rng)),
            input: action(4, ActionKind::Rot90Image),
            output: action(4, ActionKind::Trivial),
            feature_dim: 12,
            sample: Box::new(image(4)),
        },
        Case {
            name: "hflip/hflip",
            model: Box::new(Mlp::random(&[9, 10, 9], Activation::Tanh, rng).with_out_shape(&[3, 3])),
            input: action(2, ActionKind::HflipImage),
            output: action(2, ActionKind::HflipImage),
            feature_dim: 10,
            sample: Box::new(image(3)),
        },
        Case {
            name: "negate/negate",
            model: Box::new(Mlp::random(&[3, 10, 3], Activation::Tanh, rng)),
            input: action(2, ActionKind::Negate),
            output: action(2, ActionKind::Negate),
            feature_dim: 10,
            sample: Box::new(vector(3)),
        },
        Case {
            name: "plane/plane",
            model: Box::new(Mlp::random(&[2, 10, 2], Activation::Tanh, rng)),
            input: action(4, ActionKind::PlaneRot90),
            output: action(4, ActionKind::PlaneRot90),
            feature_dim: 10,
            sample: Box::new(vector(2)),
        },
        Case {
            name: "perm/perm",
            model: Box::new(Mlp::random(&[4, 10, 4], Activation::Tanh, rng)),
            input: action(4, ActionKind::ActionPerm { generator: vec![1, 2, 3, 0] }),
            output: action(4, ActionKind::ActionPerm { generator: vec![1, 2, 3, 0] }),
            feature_dim: 10,
            sample: Box::new(vector(4)),
        },
        Case {
            name: "swap/swap",
            model: Box::new(TokenMlp::random(6, 4, 3, 9, rng)),
            input: action(2, ActionKind::TokenSwap { pairs: vec![[1, 4]] }),
            output: action(2, ActionKind::TokenSwap { pairs: vec![[1, 4]] }),
            feature_dim: 9,
            sample: Box::new(|r: &mut StreamRng| Point::Tokens((0..4).map(|_| r.gen_range(0..6)).collect())),
        },
    ]
}

fn configs(case: &Case, rng: &mut StreamRng) -> Vec<EquiConfig> {
    let base = EquiConfig::equitune(case.input.clone(), case.output.clone());
    let net = Lambda::Net(make_lambda_net(case.feature_dim, rng));
    vec![
        base.clone(),
        base.clone().with_mode(Mode::Equizero).with_proxy(ProxyLoss::Entropy),
        base.clone().with_mode(Mode::Lambda).with_lambda(net.clone()),
        base.with_mode(Mode::Lambda).with_lambda(net).with_features(FeatureSource::Live),
    ]
}

#[test]
fn every_wrapper_is_equivariant_for_every_action_pair() {
    let mut rng = substream(11, "t");
    for case in cases(&mut rng) {
        for c in configs(&case, &mut rng) {
            let mut checked = 0;
            while checked < 50 {
                let x = (case.sample)(&mut rng);
                let tape = Tape::new();
                let base = forward(case.model.as_ref(), &c, &tape, &x, Modes::FROZEN).unwrap();
                if c.mode == Mode::Equizero {
                    // points with a non-trivial stabilizer tie exactly; skip them
                    let mut l = base.losses[0].clone();
                    l.sort_by(f64::total_cmp);
                    if l[1] - l[0] <= 1e-12 {
                        continue;
                    }
                }
                checked += 1;
                for g in c.input.group().elements() {
                    let gx = c.input.act(g, &x).unwrap();
                    let lhs = predict(case.model.as_ref(), &c, &gx).unwrap();
                    let rhs = c.output.act_tensor(g, &base.output.value()).unwrap();
                    assert!(lhs.max_abs_diff(&rhs) <= 1e-9, "{} {:?} g={g}", case.name, c.mode);
                }
            }
        }
    }
}

#[test]
fn equizero_picks_the_brute_force_minimizer() {
    let echo = Echo(ParamStore::new());
    let rot = action(4, ActionKind::Rot90Image);
    let c = EquiConfig::equizero(rot.clone(), action(4, ActionKind::Trivial), first_entry());
    // top-left entries of the four rotations are 3, 1, 2, 5
    let x = Point::Real(Tensor::new(vec![2, 2], vec![3.0, 1.0, 5.0, 2.0]).unwrap());
    let tape = Tape::new();
    let out = forward(&echo, &c, &tape, &x, Modes::FROZEN).unwrap();
    assert_eq!(out.losses[0], vec![3.0, 1.0, 2.0, 5.0]);
    assert_eq!(out.g_star, vec![1]);
    assert_eq!(out.output.value(), *rot.act(1, &x).unwrap().as_real().unwrap());

    let mut rng = substream(12, "t");
    let m = Mlp::random(&[16, 10, 16], Activation::Tanh, &mut rng).with_out_shape(&[4, 4]);
    let c = EquiConfig::equizero(rot.clone(), rot.clone(), ProxyLoss::NegMaxProb);
    for _ in 0..20 {
        let x = Point::Real(randn(&[4, 4], &mut rng));
        let losses: Vec<f64> = (0..4)
            .map(|g| neg_max_prob(m.predict(&rot.act(g, &x).unwrap()).unwrap().data()).unwrap())
            .collect();
        let best = (0..4).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
        let tape = Tape::new();
        let (y, g) = equizero_forward(&m, &c, &tape, &x, Modes::FROZEN).unwrap();
        assert_eq!(g, best);
        let inv = c.input.group().inverse(best);
        assert_eq!(y.value(), rot.act_tensor(inv, &m.predict(&rot.act(best, &x).unwrap()).unwrap()).unwrap());
    }
}

#[test]
fn equizero_ties_pick_the_identity() {
    let mut rng = substream(13, "t");
    let m = Mlp::random(&[16, 8, 16], Activation::Tanh, &mut rng).with_out_shape(&[4, 4]);
    let rot = action(4, ActionKind::Rot90Image);
    let c = EquiConfig::equizero(rot.clone(), rot, ProxyLoss::Custom(Arc::new(|_: &[f64]| 0.0)));
    let x = Point::Real(randn(&[4, 4], &mut rng));
    let tape = Tape::new();
    let (y, g) = equizero_forward(&m, &c, &tape, &x, Modes::FROZEN).unwrap();
    assert_eq!(g, 0);
    assert_eq!(y.value(), m.predict(&x).unwrap());
    assert_eq!(argmin_first(&[2.0, 1.0, 1.0]), 1);
}

#[test]
fn trivial_group_reduces_to_the_backbone() {
    let mut rng = substream(14, "t");
    let m = Mlp::random(&[3, 8, 3], Activation::Tanh, &mut rng);
    let one = action(1, ActionKind::Trivial);
    let x = Point::Real(randn(&[3], &mut rng));
    for c in [
        EquiConfig::equitune(one.clone(), one.clone()),
        EquiConfig::equizero(one.clone(), one.clone(), ProxyLoss::Entropy),
        EquiConfig::lambda(one.clone(), one.clone(), Lambda::constant(0.3)),
    ] {
        let d = predict(&m, &c, &x).unwrap().max_abs_diff(&m.predict(&x).unwrap());
        assert!(d <= 1e-15, "{:?}: {d}", c.mode);
    }
}

#[test]
fn lambda_reductions() {
    let mut rng = substream(15, "t");
    let m = Mlp::random(&[16, 8, 16], Activation::Tanh, &mut rng).with_out_shape(&[4, 4]);
    let rot = action(4, ActionKind::Rot90Image);
    let eq = EquiConfig::equitune(rot.clone(), rot.clone());
    let zero = EquiConfig::equizero(rot.clone(), rot.clone(), ProxyLoss::Entropy);
    for _ in 0..20 {
        let x = Point::Real(randn(&[4, 4], &mut rng));
        let constant = EquiConfig::lambda(rot.clone(), rot.clone(), Lambda::constant(2.5));
        let d = predict(&m, &constant, &x).unwrap().max_abs_diff(&predict(&m, &eq, &x).unwrap());
        assert!(d <= 1e-12, "{d}");
        let tape = Tape::new();
        let (y0, g) = equizero_forward(&m, &zero, &tape, &x, Modes::FROZEN).unwrap();
        let ind = EquiConfig::lambda(rot.clone(), rot.clone(), Lambda::indicator(g));
        assert_eq!(predict(&m, &ind, &x).unwrap(), y0.value());
    }
}

#[test]
fn lambda_two_element_weighted_average() {
    let mut rng = substream(16, "t");
    let m = Mlp::random(&[3, 8, 3], Activation::Tanh, &mut rng);
    let neg = action(2, ActionKind::Negate);
    let c = EquiConfig::lambda(neg.clone(), neg, Lambda::fixed(|g, _| [1.0, 3.0][g]));
    let x = Tensor::vector(vec![0.3, -0.8, 1.2]);
    let y0 = m.predict(&Point::Real(x.clone())).unwrap();
    let y1 = m.predict(&Point::Real(Tensor::vector(x.data().iter().map(|v| -v).collect()))).unwrap();
    let y = predict(&m, &c, &Point::Real(x)).unwrap();
    for k in 0..3 {
        let expect = (y0.data()[k] + 3.0 * -y1.data()[k]) / 4.0;
        assert!((y.data()[k] - expect).abs() < 1e-15);
    }
}

#[test]
fn batch_and_single_paths_agree() {
    let mut rng = substream(17, "t");
    let m = Mlp::random(&[16, 12, 16], Activation::Tanh, &mut rng).with_out_shape(&[4, 4]);
    let rot = action(4, ActionKind::Rot90Image);
    let net = Lambda::Net(make_lambda_net(12, &mut rng));
    let xs = randn(&[5, 4, 4], &mut rng);
    for c in [
        EquiConfig::equitune(rot.clone(), rot.clone()),
        EquiConfig::equizero(rot.clone(), rot.clone(), ProxyLoss::NegMaxProb),
        EquiConfig::equizero(rot.clone(), rot.clone(), ProxyLoss::NegMaxProb).with_ste(true),
        EquiConfig::lambda(rot.clone(), rot.clone(), net.clone()),
        EquiConfig::lambda(rot.clone(), rot.clone(), Lambda::indicator(2)),
    ] {
        let tape = Tape::new();
        let batch = forward_batch(&m, &c, &tape, &xs, Modes::FROZEN).unwrap();
        for r in 0..5 {
            let x = Point::Real(Tensor::new(vec![4, 4], xs.data()[r * 16..(r + 1) * 16].to_vec()).unwrap());
            let one = forward(&m, &c, &tape, &x, Modes::FROZEN).unwrap();
            let got = &batch.output.data()[r * 16..(r + 1) * 16];
            let d = got.iter().zip(one.output.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= 1e-12, "{:?} row {r}: {d}", c.mode);
            if c.mode == Mode::Equizero {
                assert_eq!(batch.g_star[r], one.g_star[0]);
                assert_eq!(batch.losses[r], one.losses[0]);
            }
            if c.mode == Mode::Lambda {
                for (a, b) in batch.weights[r].iter().zip(&one.weights[0]) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}

fn param_grads(m: &Mlp, c: &EquiConfig, x: &Point, r: &Tensor) -> Vec<f64> {
    let mut own = m.clone();
    let tape = Tape::new();
    let out = forward(&own, c, &tape, x, Modes::BACKBONE).unwrap().output;
    let loss = out.mul(tape.constant(r.clone())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    own.params_mut().zero_grad();
    own.params_mut().accumulate(&grads);
    own.params().flat_grads()
}

#[test]
fn straight_through_gradient_matches_equitune_for_linear_losses() {
    let mut rng = substream(18, "t");
    let m = Mlp::random(&[16, 10, 16], Activation::Tanh, &mut rng).with_out_shape(&[4, 4]);
    let rot = action(4, ActionKind::Rot90Image);
    let eq = EquiConfig::equitune(rot.clone(), rot.clone());
    let ste = EquiConfig::equizero(rot.clone(), rot.clone(), ProxyLoss::NegMaxProb).with_ste(true);
    let plain = ste.clone().with_ste(false);
    for _ in 0..10 {
        let x = Point::Real(randn(&[4, 4], &mut rng));
        let r = randn(&[4, 4], &mut rng);
        let a = param_grads(&m, &eq, &x, &r);
        let b = param_grads(&m, &ste, &x, &r);
        let d = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-10, "{d}");
        assert!(a.iter().any(|v| *v != 0.0));
        // the forward value is still equizero's
        assert_eq!(predict(&m, &ste, &x).unwrap(), predict(&m, &plain, &x).unwrap());
    }
    // without the estimator the gradient only sees the chosen branch
    let x = Point::Real(randn(&[4, 4], &mut rng));
    let r = randn(&[4, 4], &mut rng);
    let a = param_grads(&m, &eq, &x, &r);
    let b = param_grads(&m, &plain, &x, &r);
    assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn equizero_with_invertible_backbone_recovers_the_input() {
    let mut rng = substream(19, "t");
    let m = AffineModel::random(2, &mut rng);
    let plane = action(4, ActionKind::PlaneRot90);
    let c = EquiConfig::equizero(plane.clone(), plane.clone(), ProxyLoss::NegMaxProb);
    for _ in 0..50 {
        let x = randn(&[2], &mut rng);
        let tape = Tape::new();
        let (y, g) = equizero_forward(&m, &c, &tape, &Point::Real(x.clone()), Modes::FROZEN).unwrap();
        let gy = plane.act_tensor(g, &y.value()).unwrap();
        let gx = m.invert(&gy).unwrap();
        let back = plane.act_tensor(plane.group().inverse(g), &gx).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-9);
    }
}

#[test]
fn proxy_loss_values() {
    assert_eq!(neg_max_prob(&[0.0, 0.0]).unwrap(), -0.5);
    assert!((entropy(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!((neg_max_softmax_q(&[1.0, 1.0, 1.0]).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(neg_max_prob(&[]), Err(WrapError::EmptyOutput));
    assert_eq!(entropy(&[]), Err(WrapError::EmptyOutput));
    assert_eq!(ProxyLoss::from(ProxyKind::Entropy).name(), "entropy");
    let k: ProxyKind = serde_json::from_str("\"neg_max_softmax_q\"").unwrap();
    assert_eq!(k, ProxyKind::NegMaxSoftmaxQ);
}

#[test]
fn lambda_net_shape_positivity_and_gradients() {
    let mut rng = substream(20, "t");
    assert_eq!(make_lambda_net(512, &mut rng).num_params(), 512 * 100 + 100 + 100 + 1);
    let net = make_lambda_net(7, &mut rng);
    for _ in 0..1000 {
        let f: Vec<f64> = (0..7).map(|_| 20.0 * normal(&mut rng)).collect();
        assert!(net.weight(&f) > 0.0);
    }
    let tape = Tape::new();
    let fs = randn(&[3, 7], &mut rng);
    assert_eq!(net.forward(&tape, tape.constant(fs.clone()), ParamMode::Frozen).unwrap().shape(), vec![3, 1]);
    let report = grad_check(net.params(), |tape, s| {
        Ok(net.forward_with(s, tape, tape.constant(fs.clone()), ParamMode::Train)?.log().sum())
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn configuration_errors() {
    let mut rng = substream(21, "t");
    let m = Mlp::random(&[3, 4, 3], Activation::Tanh, &mut rng);
    let neg = action(2, ActionKind::Negate);
    let x = Point::Real(Tensor::vector(vec![0.1, 0.2, 0.3]));
    let mut c = EquiConfig::equitune(neg.clone(), neg.clone()).with_mode(Mode::Equizero);
    assert_eq!(predict(&m, &c, &x).unwrap_err(), WrapError::MissingProxy);
    c.mode = Mode::Lambda;
    assert_eq!(predict(&m, &c, &x).unwrap_err(), WrapError::MissingLambda);
    let nan = EquiConfig::equizero(neg.clone(), neg.clone(), ProxyLoss::Custom(Arc::new(|_: &[f64]| f64::NAN)));
    assert_eq!(predict(&m, &nan, &x).unwrap_err(), WrapError::NanLoss { g: 0 });
    let negative = EquiConfig::lambda(neg.clone(), neg.clone(), Lambda::fixed(|g, _| if g == 1 { -1.0 } else { 1.0 }));
    assert_eq!(predict(&m, &negative, &x).unwrap_err(), WrapError::BadWeight { g: 1, value: -1.0 });
    let zeros = EquiConfig::lambda(neg.clone(), neg.clone(), Lambda::constant(0.0));
    assert_eq!(predict(&m, &zeros, &x).unwrap_err(), WrapError::ZeroDenominator);
    let mixed = EquiConfig::equitune(neg.clone(), action(4, ActionKind::PlaneRot90));
    assert!(matches!(predict(&m, &mixed, &x), Err(WrapError::Config(_))));
    let tape = Tape::new();
    let eq = EquiConfig::equitune(neg.clone(), neg);
    assert!(matches!(lambda_equitune_forward(&m, &eq, &tape, &x, Modes::FROZEN), Err(WrapError::Config(_))));
    assert!(matches!(predict(&m, &eq, &Point::Real(Tensor::vector(vec![1.0]))), Err(WrapError::Model(_))));
}

#[test]
fn weighted_average_minimizes_the_symmetrization_objective() {
    let mut rng = substream(22, "t");
    let m = Mlp::random(&[16, 12, 16], Activation::Tanh, &mut rng).with_out_shape(&[4, 4]);
    let rot = action(4, ActionKind::Rot90Image);
    let c = EquiConfig::lambda(rot.clone(), rot.clone(), Lambda::Net(make_lambda_net(12, &mut rng)));
    let x = Point::Real(randn(&[4, 4], &mut rng));
    let y = predict(&m, &c, &x).unwrap();
    let best = symmetrization_objective(&m, &c, &x, &y).unwrap();
    for _ in 0..100 {
        let d = randn(&[4, 4], &mut rng);
        let norm = d.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let p = Tensor::new(vec![4, 4], y.data().iter().zip(d.data()).map(|(a, b)| a + 0.1 * b / norm).collect()).unwrap();
        assert!(best <= symmetrization_objective(&m, &c, &x, &p).unwrap());
    }

    // unit weights: the equitune output is the minimizer
    let eq = EquiConfig::equitune(rot.clone(), rot.clone());
    let ye = predict(&m, &eq, &x).unwrap();
    let at = symmetrization_objective(&m, &eq, &x, &ye).unwrap();
    for k in 0..16 {
        for s in [-1e-3, 1e-3] {
            let mut p = ye.clone();
            p.data_mut()[k] += s;
            assert!(at < symmetrization_objective(&m, &eq, &x, &p).unwrap());
        }
    }

    // the weight-inside-the-norm form is minimized by the unnormalized average
    let tape = Tape::new();
    let w = forward(&m, &c, &tape, &x, Modes::FROZEN).unwrap().weights.remove(0);
    let mut unnorm = Tensor::zeros(&[4, 4]);
    for g in 0..4 {
        let back = rot.act_tensor(rot.group().inverse(g), &m.predict(&rot.act(g, &x).unwrap()).unwrap()).unwrap();
        for (u, b) in unnorm.data_mut().iter_mut().zip(back.data()) {
            *u += w[g] * b / 4.0;
        }
    }
    let lit = symmetrization_objective_literal(&m, &c, &x, &unnorm).unwrap();
    assert!(lit < symmetrization_objective_literal(&m, &c, &x, &y).unwrap());
    for k in 0..16 {
        let mut p = unnorm.clone();
        p.data_mut()[k] += 1e-3;
        assert!(lit < symmetrization_objective_literal(&m, &c, &x, &p).unwrap());
    }
}

#[test]
fn single_element_objective_is_minimized_by_the_backbone() {
    let mut rng = substream(23, "t");
    let m = Mlp::random(&[3, 6, 3], Activation::Tanh, &mut rng);
    let one = action(1, ActionKind::Trivial);
    let c = EquiConfig::lambda(one.clone(), one, Lambda::constant(0.7));
    let x = Point::Real(randn(&[3], &mut rng));
    let y = m.predict(&x).unwrap();
    assert_eq!(symmetrization_objective(&m, &c, &x, &y).unwrap(), 0.0);
}

fn toy_classification(rng: &mut StreamRng) -> Vec<Example> {
    (0..40)
        .map(|i| {
            let x = randn(&[4, 4], rng);
            let label = usize::from(x.data()[..8].iter().sum::<f64>() > 0.0) + 2 * (i % 2);
            Example::class(x, label)
        })
        .collect()
}

#[test]
fn lambda_training_lowers_the_loss_and_leaves_the_backbone_alone() {
    let mut rng = substream(24, "t");
    let m = Mlp::random(&[16, 12, 4], Activation::Tanh, &mut rng);
    let before = m.params().clone();
    let rot = action(4, ActionKind::Rot90Image);
    let mut c = EquiConfig::lambda(rot, action(4, ActionKind::Trivial), Lambda::Net(make_lambda_net(12, &mut rng)));
    let data = toy_classification(&mut rng);
    let opts = TrainOpts {
        steps: 150,
        batch_size: 40,
        ..TrainOpts::lambda_phase()
    };
    let report = train_lambda(&m, &mut c, &data, &opts).unwrap();
    assert!(report.final_loss().unwrap() < report.losses[0]);
    assert_eq!(m.params(), &before);

    // the cached path trains the same objective the live wrapper computes
    let tape = Tape::new();
    let xs = trainable_stack(&data);
    let out = forward_batch(&m, &c, &tape, &xs, Modes::FROZEN).unwrap().output;
    let labels: Vec<&Target> = data.iter().map(|e| &e.target).collect();
    let live = train::batch_loss(&tape, out, &labels).unwrap().item();
    let mut again = c.clone();
    let one = TrainOpts { steps: 1, lr: 0.0, ..opts };
    let cached = train_lambda(&m, &mut again, &data, &one).unwrap().losses[0];
    assert!((live - cached).abs() < 1e-12, "{live} vs {cached}");
}

fn trainable_stack(data: &[Example]) -> Tensor {
    train::stack(&data.iter().map(|e| &e.input).collect::<Vec<_>>()).unwrap()
}

#[test]
fn finetuning_lowers_the_loss_in_every_mode() {
    let mut rng = substream(25, "t");
    let data = toy_classification(&mut rng);
    let rot = action(4, ActionKind::Rot90Image);
    let triv = action(4, ActionKind::Trivial);
    let init = Mlp::random(&[16, 12, 4], Activation::Tanh, &mut rng);
    let net = Lambda::Net(make_lambda_net(12, &mut rng));
    let opts = TrainOpts {
        steps: 60,
        lr: 1e-2,
        batch_size: 16,
        ..TrainOpts::finetune()
    };
    for c in [
        EquiConfig::equitune(rot.clone(), triv.clone()),
        EquiConfig::equizero(rot.clone(), triv.clone(), ProxyLoss::NegMaxProb).with_ste(true),
        EquiConfig::equizero(rot.clone(), triv.clone(), ProxyLoss::NegMaxProb),
        EquiConfig::lambda(rot.clone(), triv.clone(), net.clone()),
    ] {
        let mut m = init.clone();
        let lam = c.lambda.as_ref().and_then(Lambda::net).map(|n| n.params().clone());
        let report = finetune(&mut m, &c, &data, &opts).unwrap();
        let head: f64 = report.losses[..10].iter().sum();
        let tail: f64 = report.losses[50..].iter().sum();
        assert!(tail < head, "{:?}: {head} -> {tail}", c.mode);
        if let Some(l) = lam {
            assert_eq!(c.lambda.as_ref().and_then(Lambda::net).unwrap().params(), &l);
        }
    }
}

#[test]
fn finetuning_is_deterministic() {
    let run = || {
        let mut rng = substream(26, "t");
        let data = toy_classification(&mut rng);
        let mut m = Mlp::random(&[16, 12, 4], Activation::Tanh, &mut rng);
        let rot = action(4, ActionKind::Rot90Image);
        let c = EquiConfig::equitune(rot, action(4, ActionKind::Trivial));
        finetune(&mut m, &c, &data, &TrainOpts { steps: 5, ..TrainOpts::finetune() }).unwrap();
        m.params().flat_values()
    };
    assert_eq!(run(), run());
}

#[test]
fn universality_targets_are_exactly_equivariant() {
    for f in [UniversalityFixture::linear_negation(1), UniversalityFixture::symmetrized_cubic(1)] {
        assert!(f.target_equivariance_error() <= 1e-12, "{f:?}");
        assert_eq!(f.grid_points().shape(), &[441, 2]);
    }
}

#[test]
fn universality_linear_fit_reaches_tolerance() {
    let f = UniversalityFixture::linear_negation(2);
    let p = universality_fit(&f, 3000, 2).unwrap();
    assert!(p.sup_error <= f.tolerance, "{p:?}");
    assert!(p.equivariance_error <= 1e-9);
}

#[test]
fn universality_cubic_error_falls_with_budget() {
    let f = UniversalityFixture::symmetrized_cubic(3);
    let curve = universality_curve(&f, &[200, 800, 3000], 3).unwrap();
    for w in curve.windows(2) {
        assert!(w[1].sup_error < w[0].sup_error, "{curve:?}");
    }
    for p in &curve {
        assert!(p.equivariance_error <= 1e-9, "{p:?}");
    }
}

#[test]
fn g_star_log_csv() {
    let mut log = GStarLog::new();
    log.record("a", 1, &[0.5, 0.25]);
    log.record("b", 0, &[0.1, 0.2]);
    assert_eq!(log.to_csv(), "example_id,g_star,loss_g0,loss_g1\na,1,0.5,0.25\nb,0,0.1,0.2\n");
    assert_eq!(log.histogram(2), vec![0.5, 0.5]);
}

#[test]
fn batched_weighted_average_gradients_match_finite_differences() {
    let mut rng = substream(27, "t");
    let m = Mlp::random(&[2, 6, 2], Activation::Tanh, &mut rng);
    let f = UniversalityFixture::linear_negation(4);
    let c = universality_config(&f, 4);
    let xs = randn(&[5, 2], &mut rng);
    let ys = randn(&[5, 2], &mut rng);
    let report = grad_check(m.params(), |tape, s| {
        let bound = crate::models::Bound { model: &m, store: s };
        let out = forward_batch(&bound, &c, tape, &xs, Modes::BACKBONE).map_err(|e| match e {
            WrapError::Diff(d) => d,
            other => panic!("{other}"),
        })?;
        out.output.mse(tape.constant(ys.clone()))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}
