use rand::seq::index::sample;

use super::{DiffError, ParamStore, Tape, Var};
use crate::rng::substream;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Coordinates checked exhaustively up to this many parameters; above it a
/// seeded sample of this size is used.
const EXHAUSTIVE_LIMIT: usize = 10_000;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backpropagated parameter gradients of the scalar `f` against
/// central finite differences.
pub fn grad_check<F>(store: &ParamStore, f: F) -> Result<GradCheckReport, DiffError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, DiffError>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    {
        let tape = Tape::new();
        let root = f(&tape, &analytic_store)?;
        let grads = tape.backward(root)?;
        analytic_store.accumulate(&grads);
    }
    let analytic = analytic_store.flat_grads();
    let total = analytic.len();
    let coords: Vec<usize> = if total <= EXHAUSTIVE_LIMIT {
        (0..total).collect()
    } else {
        let mut rng = substream(total as u64, "grad_check");
        let mut picked = sample(&mut rng, total, EXHAUSTIVE_LIMIT).into_vec();
        picked.sort_unstable();
        picked
    };

    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let tape = Tape::new();
        Ok(f(&tape, s)?.item())
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: coords.len(),
    };
    for k in coords {
        let orig = probe.get_flat(k);
        probe.set_flat(k, orig + FD_STEP);
        let up = eval(&probe)?;
        probe.set_flat(k, orig - FD_STEP);
        let down = eval(&probe)?;
        probe.set_flat(k, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[k], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = k;
        }
    }
    Ok(report)
}
