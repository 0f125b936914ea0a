//! Parameter initialisers and small layer helpers shared by the backbones.

use rand::Rng;

use super::{DiffError, ParamMode, ParamStore, Tape, Tensor, Var};
use crate::rng::{normal, StreamRng};

/// Uniform Glorot init for a `[fan_in, fan_out]` weight plus zero bias.
pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut StreamRng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    store.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("shape"));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// He-normal init for a `[out_c, in_c, k, k]` kernel plus zero bias.
pub fn init_conv(store: &mut ParamStore, prefix: &str, in_c: usize, out_c: usize, k: usize, rng: &mut StreamRng) {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let w = (0..out_c * in_c * k * k).map(|_| std * normal(rng)).collect();
    store.insert(format!("{prefix}.w"), Tensor::new(vec![out_c, in_c, k, k], w).expect("shape"));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[out_c]));
}

/// Gaussian embedding table `[vocab, dim]`.
pub fn init_embedding(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut StreamRng) {
    let w = (0..vocab * dim).map(|_| 0.3 * normal(rng)).collect();
    store.insert(name, Tensor::new(vec![vocab, dim], w).expect("shape"));
}

/// `x W + b` over the last axis of a 1-D or 2-D input.
pub fn linear<'t>(tape: &'t Tape, store: &ParamStore, prefix: &str, x: Var<'t>, mode: ParamMode) -> Result<Var<'t>, DiffError> {
    let w = tape.param(store, &format!("{prefix}.w"), mode);
    let b = tape.param(store, &format!("{prefix}.b"), mode);
    x.matmul(w)?.add(b)
}

pub fn conv<'t>(tape: &'t Tape, store: &ParamStore, prefix: &str, x: Var<'t>, pad: usize, mode: ParamMode) -> Result<Var<'t>, DiffError> {
    let w = tape.param(store, &format!("{prefix}.w"), mode);
    let b = tape.param(store, &format!("{prefix}.b"), mode);
    x.conv2d(w, b, pad)
}

/// Single-gate recurrent cell:
/// `z = σ(x Wz + h Uz + bz)`, `c = tanh(x Wc + h Uc + bc)`, `h' = h + z ⊙ (c − h)`.
///
/// The two gates share one input and one recurrent matrix of width `2·hidden`.
#[derive(Clone, Debug)]
pub struct GatedCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl GatedCell {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        init_linear(store, &format!("{prefix}.in"), input, 2 * hidden, rng);
        let bound = (3.0 / hidden as f64).sqrt();
        let u = (0..hidden * 2 * hidden).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(format!("{prefix}.rec.w"), Tensor::new(vec![hidden, 2 * hidden], u).expect("shape"));
        Self {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    pub fn step<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, h: Var<'t>, mode: ParamMode) -> Result<Var<'t>, DiffError> {
        let u = tape.param(store, &format!("{}.rec.w", self.prefix), mode);
        let pre = linear(tape, store, &format!("{}.in", self.prefix), x, mode)?.add(h.matmul(u)?)?;
        let z = pre.slice_last(0, self.hidden)?.sigmoid();
        let c = pre.slice_last(self.hidden, self.hidden)?.tanh();
        h.add(z.mul(c.sub(h)?)?)
    }
}
