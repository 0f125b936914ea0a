use super::{forward, EquiConfig, Mode, Modes, WrapError};
use crate::diff::{Tape, Tensor};
use crate::group::Point;
use crate::models::Backbone;

fn orbit(m: &dyn Backbone, c: &EquiConfig, x: &Point) -> Result<(Vec<Tensor>, Vec<f64>), WrapError> {
    let outputs = c
        .input
        .group()
        .elements()
        .map(|g| Ok(m.predict(&c.input.act(g, x)?)?))
        .collect::<Result<Vec<_>, WrapError>>()?;
    let weights = match c.mode {
        Mode::Lambda => {
            let tape = Tape::new();
            forward(m, c, &tape, x, Modes::FROZEN)?.weights.remove(0)
        }
        _ => vec![1.0; outputs.len()],
    };
    Ok((outputs, weights))
}

fn sq_dist(a: &Tensor, b: &Tensor) -> Result<f64, WrapError> {
    if a.shape() != b.shape() {
        return Err(WrapError::Config(format!("candidate shape {:?} vs output {:?}", b.shape(), a.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum())
}

/// `Σ_g λ(gx) ‖m(gx) − g·y‖²` for the equivariant candidate determined by its
/// value `y` at `x`. Its minimizer over `y` is the λ-equitune output; with
/// any mode other than `Lambda` the weights are all one and the minimizer is
/// the equitune output.
pub fn symmetrization_objective(m: &dyn Backbone, c: &EquiConfig, x: &Point, candidate: &Tensor) -> Result<f64, WrapError> {
    let (outputs, weights) = orbit(m, c, x)?;
    let mut total = 0.0;
    for (g, (out, w)) in outputs.iter().zip(&weights).enumerate() {
        total += w * sq_dist(out, &c.output.act_tensor(g, candidate)?)?;
    }
    Ok(total)
}

/// `Σ_g ‖λ(gx)·m(gx) − g·y‖²`, with the weight inside the norm. Its minimizer
/// is `(1/|G|) Σ_g g⁻¹ λ(gx) m(gx)`, which is not normalized by `Σ_g λ(gx)`;
/// kept for comparison with [`symmetrization_objective`].
pub fn symmetrization_objective_literal(
    m: &dyn Backbone,
    c: &EquiConfig,
    x: &Point,
    candidate: &Tensor,
) -> Result<f64, WrapError> {
    let (outputs, weights) = orbit(m, c, x)?;
    let mut total = 0.0;
    for (g, (out, w)) in outputs.iter().zip(&weights).enumerate() {
        let scaled = Tensor::new(out.shape().to_vec(), out.data().iter().map(|v| v * w).collect())?;
        total += sq_dist(&scaled, &c.output.act_tensor(g, candidate)?)?;
    }
    Ok(total)
}
