use proptest::prelude::*;

use super::nn::{init_conv, init_linear, linear};
use super::*;
use crate::rng::substream;

fn input_grad(f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>, x: Tensor) -> Vec<f64> {
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let y = f(&tape, xv);
    tape.backward(y).unwrap().wrt(xv).map(<[f64]>::to_vec).unwrap_or_default()
}

#[test]
fn relu_of_negative_is_zero_with_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(-1.5));
    let y = x.relu();
    assert_eq!(y.item(), 0.0);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::vector(vec![0.0, 0.0])).softmax().unwrap();
    assert_eq!(y.data(), vec![0.5, 0.5]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_classes() {
    let tape = Tape::new();
    let quarter = 0.25f64.ln();
    let logits = tape.constant(Tensor::vector(vec![quarter; 4]));
    for t in 0..4 {
        let ce = logits.cross_entropy(&[t]).unwrap();
        assert!((ce.item() - 4f64.ln()).abs() < 1e-12);
    }
    assert!((4f64.ln() - 1.3863).abs() < 1e-4);
}

#[test]
fn square_has_gradient_two_x() {
    let g = input_grad(|_, x| x.mul(x).unwrap(), Tensor::scalar(3.0));
    assert_eq!(g, vec![6.0]);
}

#[test]
fn detached_branch_contributes_nothing() {
    let g = input_grad(|_, x| x.add(x.detach()).unwrap(), Tensor::scalar(2.0));
    assert_eq!(g, vec![1.0]);

    let tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(1.7));
    let b = tape.leaf(Tensor::scalar(-0.3));
    let y = a.add(b.mul(a).unwrap().detach()).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.wrt(a).unwrap(), &[1.0]);
    assert_eq!(grads.wrt(b), None);
}

#[test]
fn detach_keeps_forward_value_bit_exact() {
    let tape = Tape::new();
    let v = tape.leaf(Tensor::vector(vec![0.1, -2.5, 1e-300, 7.0])).tanh();
    assert_eq!(v.detach().data(), v.data());
    assert!(!v.detach().requires_grad());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(tape.backward(v).err(), Some(DiffError::NonScalarRoot(vec![2])));
}

#[test]
fn shape_and_empty_axis_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(a.add(b), Err(DiffError::ShapeMismatch(_))));
    let empty = tape.constant(Tensor::zeros(&[0]));
    assert_eq!(empty.softmax().err(), Some(DiffError::EmptyAxis));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(c.matmul(c).is_err());
}

#[test]
fn column_broadcast_scales_rows() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap());
    store.insert("x", Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let tape = Tape::new();
    let w = tape.param(&store, "w", ParamMode::Frozen);
    let x = tape.param(&store, "x", ParamMode::Frozen);
    assert_eq!(x.mul(w).unwrap().data(), vec![2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
    assert_eq!(x.div(w).unwrap().data(), vec![0.5, 1.0, 1.5, -4.0, -5.0, -6.0]);
    let report = grad_check(&store, |tape, s| {
        let w = tape.param(s, "w", ParamMode::Train);
        let x = tape.param(s, "x", ParamMode::Train);
        Ok(x.mul(w)?.add(w)?.div(w.add_scalar(3.0))?.sub(w)?.tanh().sum())
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(3.0));
    let tape = Tape::new();
    let w = tape.param(&store, "w", ParamMode::Train);
    let y = w.mul(w).unwrap();
    store.accumulate(&tape.backward(y).unwrap());
    store.accumulate(&tape.backward(y).unwrap());
    assert_eq!(store.grad("w").unwrap(), &[12.0]);
}

fn mlp_store(seed: u64, sizes: &[usize]) -> ParamStore {
    let mut rng = substream(seed, "test-init");
    let mut store = ParamStore::new();
    for (i, w) in sizes.windows(2).enumerate() {
        init_linear(&mut store, &format!("l{i}"), w[0], w[1], &mut rng);
    }
    // non-zero biases keep relu units away from exact kinks
    for i in 0..sizes.len() - 1 {
        let b = store.index_of(&format!("l{i}.b")).unwrap();
        let n = store.value_at(b).numel();
        *store.value_at_mut(b) = Tensor::vector((0..n).map(|k| 0.05 + 0.01 * k as f64).collect());
    }
    store
}

#[test]
fn grad_check_exact_for_linear_model() {
    let store = mlp_store(1, &[5, 3]);
    let x = Tensor::vector(vec![0.3, -1.2, 0.7, 2.0, -0.4]);
    let report = grad_check(&store, |tape, s| {
        let h = linear(tape, s, "l0", tape.constant(x.clone()), ParamMode::Train)?;
        Ok(h.sum())
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn grad_check_mean_relu_network_8_8_1() {
    let store = mlp_store(2, &[8, 8, 1]);
    let x = Tensor::vector((0..8).map(|i| (i as f64 * 0.37).sin()).collect());
    let report = grad_check(&store, |tape, s| {
        let h = linear(tape, s, "l0", tape.constant(x.clone()), ParamMode::Train)?.relu();
        Ok(linear(tape, s, "l1", h, ParamMode::Train)?.relu().mean())
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn grad_check_two_layer_mlp() {
    let store = mlp_store(3, &[6, 10, 4]);
    let x = Tensor::new(vec![3, 6], (0..18).map(|i| ((i * 7) as f64 * 0.13).cos()).collect()).unwrap();
    let report = grad_check(&store, |tape, s| {
        let h = linear(tape, s, "l0", tape.constant(x.clone()), ParamMode::Train)?.relu();
        linear(tape, s, "l1", h, ParamMode::Train)?.cross_entropy(&[0, 3, 1])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn grad_check_conv_softmax_cross_entropy() {
    let mut rng = substream(4, "test-init");
    let mut store = ParamStore::new();
    init_conv(&mut store, "c", 2, 3, 3, &mut rng);
    let x = Tensor::new(vec![2, 5, 5], (0..50).map(|i| ((i * 13 % 17) as f64 - 8.0) * 0.1).collect()).unwrap();
    let report = grad_check(&store, |tape, s| {
        let y = super::nn::conv(tape, s, "c", tape.constant(x.clone()), 1, ParamMode::Train)?;
        let logits = y.reshape(&[3, 25])?;
        logits.softmax()?.log().cross_entropy(&[0, 12, 24])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

/// Every op in one smooth scalar function, checked w.r.t. its input.
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = substream(5, "test-init");
    let mut store = ParamStore::new();
    init_linear(&mut store, "l", 4, 4, &mut rng);
    init_conv(&mut store, "c", 1, 2, 3, &mut rng);
    super::nn::init_embedding(&mut store, "emb", 5, 4, &mut rng);
    store.insert("s", Tensor::scalar(0.7));
    let report = grad_check(&store, |tape, s| {
        let emb = tape.param(s, "emb", ParamMode::Train).embed(&[1, 3, 3, 0])?;
        let lin = linear(tape, s, "l", emb, ParamMode::Train)?;
        let img = lin.tanh().reshape(&[1, 4, 4])?;
        let conv = super::nn::conv(tape, s, "c", img, 1, ParamMode::Train)?;
        let pooled = conv.max_pool2()?.sigmoid();
        let sc = tape.param(s, "s", ParamMode::Train);
        let flat = pooled.flatten();
        let a = flat.slice_last(0, 4)?;
        let b = flat.slice_last(4, 4)?;
        let ws = tape.weighted_sum(&[a, b], &[sc, sc.exp()])?;
        let cat = tape.concat(&[ws, a.softplus(), b.add_scalar(2.0).log()])?;
        let perm = cat.gather((0..12).rev().collect(), Some((0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()), &[3, 4])?;
        let ls = perm.log_softmax()?.pick(&[0, 2, 3])?;
        let d = ls.div(sc.add_scalar(1.0))?.sub(a.slice_last(0, 3)?)?;
        let target = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        Ok(d.mse(target)?.add(ls.scale(-0.5).mean())?)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn checkpoint_rejects_wrong_format_and_shape() {
    assert!(ParamStore::from_checkpoint_json(r#"{"format":2,"params":{}}"#).is_err());
    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros(&[2]));
    let bad = r#"{"format":1,"params":{"w":{"shape":[3],"data":[1,2,3]}}}"#;
    assert!(store.load_checkpoint_json(bad).is_err());
    let inconsistent = r#"{"format":1,"params":{"w":{"shape":[3],"data":[1,2]}}}"#;
    assert!(ParamStore::from_checkpoint_json(inconsistent).is_err());
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_exact(values in proptest::collection::vec(-1e300f64..1e300, 1..40), tiny in -1e-300f64..1e-300) {
        let mut store = ParamStore::new();
        let n = values.len();
        store.insert("a.w", Tensor::vector(values));
        store.insert("b", Tensor::new(vec![1, 1], vec![tiny]).unwrap());
        let text = store.to_checkpoint_json().unwrap();
        let back = ParamStore::from_checkpoint_json(&text).unwrap();
        prop_assert_eq!(back.value("a.w").unwrap().numel(), n);
        for name in ["a.w", "b"] {
            let x = store.value(name).unwrap();
            let y = back.value(name).unwrap();
            prop_assert_eq!(x.shape(), y.shape());
            for (p, q) in x.data().iter().zip(y.data()) {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(v)).softmax().unwrap().data();
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
