use std::fmt;
use std::sync::Arc;

use crate::diff::nn::{init_linear, linear};
use crate::diff::{DiffError, ParamMode, ParamStore, Tape, Var};
use crate::rng::StreamRng;

pub const LAMBDA_HIDDEN: usize = 100;
/// Added after the softplus so weights stay strictly positive.
pub const LAMBDA_FLOOR: f64 = 1e-6;

/// `λ(f) = softplus(W2 relu(W1 f + b1) + b2) + 1e-6`.
#[derive(Clone, Debug)]
pub struct LambdaNet {
    store: ParamStore,
    feature_dim: usize,
}

pub fn make_lambda_net(feature_dim: usize, rng: &mut StreamRng) -> LambdaNet {
    assert!(feature_dim >= 1, "feature_dim must be positive");
    let mut store = ParamStore::new();
    init_linear(&mut store, "lambda.l0", feature_dim, LAMBDA_HIDDEN, rng);
    init_linear(&mut store, "lambda.l1", LAMBDA_HIDDEN, 1, rng);
    LambdaNet { store, feature_dim }
}

impl LambdaNet {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `[F] -> [1]` or `[B, F] -> [B, 1]`.
    pub fn forward<'t>(&self, tape: &'t Tape, feature: Var<'t>, mode: ParamMode) -> Result<Var<'t>, DiffError> {
        self.forward_with(&self.store, tape, feature, mode)
    }

    pub fn forward_with<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        feature: Var<'t>,
        mode: ParamMode,
    ) -> Result<Var<'t>, DiffError> {
        let h = linear(tape, store, "lambda.l0", feature, mode)?.relu();
        Ok(linear(tape, store, "lambda.l1", h, mode)?.softplus().add_scalar(LAMBDA_FLOOR))
    }

    /// Weight for a single feature vector.
    pub fn weight(&self, feature: &[f64]) -> f64 {
        let tape = Tape::new();
        let f = tape.constant(crate::diff::Tensor::vector(feature.to_vec()));
        self.forward(&tape, f, ParamMode::Frozen).expect("feature width checked by caller").item()
    }
}

/// Where λ gets its weights from.
#[derive(Clone)]
pub enum Lambda {
    Net(LambdaNet),
    /// Fixed weights from the element index and the flattened transformed
    /// input. Only functions of the transformed input alone keep the wrapper
    /// equivariant; depending on the index is for reductions and tests.
    Fixed(Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Net(n) => write!(f, "Lambda::Net(feature_dim={})", n.feature_dim),
            Lambda::Fixed(_) => f.write_str("Lambda::Fixed"),
        }
    }
}

impl Lambda {
    pub fn fixed(f: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Lambda::Fixed(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::fixed(move |_, _| c)
    }

    /// One at element `at`, zero elsewhere.
    pub fn indicator(at: usize) -> Self {
        Self::fixed(move |g, _| if g == at { 1.0 } else { 0.0 })
    }

    pub fn net(&self) -> Option<&LambdaNet> {
        match self {
            Lambda::Net(n) => Some(n),
            Lambda::Fixed(_) => None,
        }
    }

    pub fn net_mut(&mut self) -> Option<&mut LambdaNet> {
        match self {
            Lambda::Net(n) => Some(n),
            Lambda::Fixed(_) => None,
        }
    }
}
