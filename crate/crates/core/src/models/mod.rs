//! Backbones: the arbitrary models `M` that the wrappers make equivariant.

mod seq2seq;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::nn::{conv, init_conv, init_embedding, init_linear, linear};
use crate::diff::{DiffError, ParamMode, ParamStore, Tape, Tensor, Var};
use crate::group::Point;
use crate::rng::{normal, StreamRng};

pub use seq2seq::{Seq2Seq, Seq2SeqConfig, DecodeTrace};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("input not accepted by {model}: {detail}")]
    Input { model: &'static str, detail: String },
    #[error("matrix is singular")]
    Singular,
}

/// Result of one backbone pass: the model output and the designated feature
/// (penultimate activation) that λ-networks read.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    pub output: Var<'t>,
    pub feature: Var<'t>,
}

/// A differentiable model `M: X -> Y` with named parameters.
pub trait Backbone: Send + Sync {
    fn params(&self) -> &ParamStore;
    /// Pass using an external parameter store with this model's layout.
    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError>;
    fn describe(&self) -> String;

    fn forward<'t>(&self, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        self.forward_with(self.params(), tape, x, mode)
    }

    /// Output value without building gradients.
    fn predict(&self, x: &Point) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        Ok(self.forward(&tape, x, ParamMode::Frozen)?.output.value())
    }

    /// Whether [`Backbone::forward_batch_with`] is available.
    fn supports_batch(&self) -> bool {
        false
    }

    /// Pass over a stack of inputs with a leading batch axis; outputs and
    /// features gain the same leading axis.
    fn forward_batch_with<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
    ) -> Result<Forward<'t>, ModelError> {
        let _ = (store, tape, mode);
        Err(ModelError::Input {
            model: "backbone",
            detail: format!("{} has no batched pass (input {:?})", self.describe(), x.shape()),
        })
    }
}

/// A backbone whose parameters can be updated in place.
pub trait Trainable: Backbone {
    fn params_mut(&mut self) -> &mut ParamStore;
}

/// A backbone evaluated against someone else's parameter store (same layout),
/// e.g. a perturbed copy inside a gradient check.
pub struct Bound<'a> {
    pub model: &'a dyn Backbone,
    pub store: &'a ParamStore,
}

impl Backbone for Bound<'_> {
    fn params(&self) -> &ParamStore {
        self.store
    }

    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        self.model.forward_with(store, tape, x, mode)
    }

    fn describe(&self) -> String {
        self.model.describe()
    }

    fn supports_batch(&self) -> bool {
        self.model.supports_batch()
    }

    fn forward_batch_with<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
    ) -> Result<Forward<'t>, ModelError> {
        self.model.forward_batch_with(store, tape, x, mode)
    }
}

fn real<'p>(model: &'static str, x: &'p Point) -> Result<&'p Tensor, ModelError> {
    x.as_real().ok_or_else(|| ModelError::Input {
        model,
        detail: "expected a real tensor".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.relu(),
        }
    }
}

/// Fully-connected network on the flattened input; the output is reshaped to
/// `out_shape` so it can live in an image or vector space.
#[derive(Clone, Debug)]
pub struct Mlp {
    store: ParamStore,
    sizes: Vec<usize>,
    out_shape: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut StreamRng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut store = ParamStore::new();
        for (i, w) in sizes.windows(2).enumerate() {
            init_linear(&mut store, &format!("l{i}"), w[0], w[1], rng);
        }
        Self {
            store,
            sizes: sizes.to_vec(),
            out_shape: vec![*sizes.last().unwrap()],
            activation,
        }
    }

    /// Randomises the biases too, so that random networks have no accidental
    /// symmetries (a zero-bias odd network commutes with negation).
    pub fn random(sizes: &[usize], activation: Activation, rng: &mut StreamRng) -> Self {
        let mut m = Self::new(sizes, activation, rng);
        for i in 0..sizes.len() - 1 {
            let idx = m.store.index_of(&format!("l{i}.b")).unwrap();
            for v in m.store.value_at_mut(idx).data_mut() {
                *v = 0.5 * normal(rng);
            }
        }
        m
    }

    pub fn with_out_shape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), *self.sizes.last().unwrap());
        self.out_shape = shape.to_vec();
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

impl Trainable for Mlp {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Backbone for Mlp {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let x = real("mlp", x)?;
        if x.numel() != self.sizes[0] {
            return Err(ModelError::Input {
                model: "mlp",
                detail: format!("expected {} values, got shape {:?}", self.sizes[0], x.shape()),
            });
        }
        let mut h = tape.constant(x.clone()).flatten();
        let mut feature = h;
        let layers = self.sizes.len() - 1;
        for i in 0..layers {
            h = linear(tape, store, &format!("l{i}"), h, mode)?;
            if i + 1 < layers {
                h = self.activation.apply(h);
                feature = h;
            }
        }
        Ok(Forward {
            output: h.reshape(&self.out_shape)?,
            feature,
        })
    }

    fn describe(&self) -> String {
        format!("mlp{:?}", self.sizes)
    }

    fn supports_batch(&self) -> bool {
        true
    }

    fn forward_batch_with<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
    ) -> Result<Forward<'t>, ModelError> {
        let shape = x.shape();
        let rows = *shape.first().unwrap_or(&0);
        if rows == 0 || x.numel() != rows * self.sizes[0] {
            return Err(ModelError::Input {
                model: "mlp",
                detail: format!("expected [N, ..{}], got {shape:?}", self.sizes[0]),
            });
        }
        let mut h = x.reshape(&[rows, self.sizes[0]])?;
        let mut feature = h;
        let layers = self.sizes.len() - 1;
        for i in 0..layers {
            h = linear(tape, store, &format!("l{i}"), h, mode)?;
            if i + 1 < layers {
                h = self.activation.apply(h);
                feature = h;
            }
        }
        let mut out_shape = vec![rows];
        out_shape.extend_from_slice(&self.out_shape);
        Ok(Forward {
            output: h.reshape(&out_shape)?,
            feature,
        })
    }
}

/// `m(x) = A x + c` on flat vectors; invertible when `A` is.
#[derive(Clone, Debug)]
pub struct AffineModel {
    store: ParamStore,
    dim: usize,
}

impl AffineModel {
    /// Random well-conditioned `A` (identity plus a small perturbation).
    pub fn random(dim: usize, rng: &mut StreamRng) -> Self {
        let a = (0..dim * dim)
            .map(|k| if k / dim == k % dim { 1.0 } else { 0.0 } + 0.3 * normal(rng) / (dim as f64).sqrt())
            .collect();
        let c = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self::from_parts(Tensor::new(vec![dim, dim], a).expect("shape"), Tensor::vector(c))
    }

    pub fn from_parts(a: Tensor, c: Tensor) -> Self {
        let dim = c.numel();
        assert_eq!(a.shape(), [dim, dim]);
        let mut store = ParamStore::new();
        store.insert("a", a);
        store.insert("c", c);
        Self { store, dim }
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, self.store.value("a").unwrap().data())
    }

    /// `A⁻¹ (y − c)`, keeping the shape of `y`.
    pub fn invert(&self, y: &Tensor) -> Result<Tensor, ModelError> {
        let c = self.store.value("c").unwrap().data();
        let rhs = DVector::from_iterator(self.dim, y.data().iter().zip(c).map(|(a, b)| a - b));
        let x = self.matrix().lu().solve(&rhs).ok_or(ModelError::Singular)?;
        Ok(Tensor::new(y.shape().to_vec(), x.iter().copied().collect())?)
    }
}

impl Trainable for AffineModel {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Backbone for AffineModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let x = real("affine", x)?;
        if x.numel() != self.dim {
            return Err(ModelError::Input {
                model: "affine",
                detail: format!("expected {} values", self.dim),
            });
        }
        let a = tape.param(store, "a", mode);
        let c = tape.param(store, "c", mode);
        // (A x)ᵀ = xᵀ Aᵀ; keep A row-major by multiplying against its rows
        let xv = tape.constant(x.clone().reshaped(&[self.dim, 1])?);
        let y = a.matmul(xv)?.flatten().add(c)?.reshape(x.shape())?;
        Ok(Forward { output: y, feature: y })
    }

    fn describe(&self) -> String {
        format!("affine{}", self.dim)
    }
}

/// Fixed-length token classifier: embed, concatenate, one hidden layer,
/// logits over the vocabulary.
#[derive(Clone, Debug)]
pub struct TokenMlp {
    store: ParamStore,
    len: usize,
    vocab: usize,
}

impl TokenMlp {
    pub fn random(vocab: usize, len: usize, dim: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        let mut store = ParamStore::new();
        init_embedding(&mut store, "emb", vocab, dim, rng);
        init_linear(&mut store, "h", len * dim, hidden, rng);
        init_linear(&mut store, "out", hidden, vocab, rng);
        for name in ["h.b", "out.b"] {
            let idx = store.index_of(name).unwrap();
            for v in store.value_at_mut(idx).data_mut() {
                *v = 0.3 * normal(rng);
            }
        }
        Self { store, len, vocab }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

impl Trainable for TokenMlp {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Backbone for TokenMlp {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let ids = x.as_tokens().ok_or_else(|| ModelError::Input {
            model: "token_mlp",
            detail: "expected tokens".into(),
        })?;
        if ids.len() != self.len {
            return Err(ModelError::Input {
                model: "token_mlp",
                detail: format!("expected {} tokens, got {}", self.len, ids.len()),
            });
        }
        let e = tape.param(store, "emb", mode).embed(ids)?.flatten();
        let h = linear(tape, store, "h", e, mode)?.tanh();
        Ok(Forward {
            output: linear(tape, store, "out", h, mode)?,
            feature: h,
        })
    }

    fn describe(&self) -> String {
        format!("token_mlp(v{}, len{})", self.vocab, self.len)
    }
}

/// Small convolutional classifier for `[1, 16, 16]` images:
/// conv3x3(8) → relu → pool → conv3x3(16) → relu → pool → fc(32) → relu → fc(classes).
/// The 32-wide activation is the designated feature.
#[derive(Clone, Debug)]
pub struct ShapeCnn {
    store: ParamStore,
    side: usize,
    classes: usize,
}

pub const CNN_FEATURE_DIM: usize = 32;

impl ShapeCnn {
    pub fn new(side: usize, classes: usize, rng: &mut StreamRng) -> Self {
        assert!(side % 4 == 0, "side must survive two 2x2 pools");
        let mut store = ParamStore::new();
        init_conv(&mut store, "c1", 1, 8, 3, rng);
        init_conv(&mut store, "c2", 8, 16, 3, rng);
        init_linear(&mut store, "fc", 16 * (side / 4) * (side / 4), CNN_FEATURE_DIM, rng);
        init_linear(&mut store, "out", CNN_FEATURE_DIM, classes, rng);
        Self { store, side, classes }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Batched pass over `[N, 1, side, side]`; returns `[N, classes]` logits
    /// and `[N, 32]` features.
    pub fn forward_batch<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        self.cnn_batch(&self.store, tape, x, mode)
    }

    fn cnn_batch<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let shape = x.shape();
        let [n, 1, h, w] = shape[..] else {
            return Err(ModelError::Input {
                model: "shape_cnn",
                detail: format!("expected [N, 1, H, W], got {shape:?}"),
            });
        };
        if h != self.side || w != self.side {
            return Err(ModelError::Input {
                model: "shape_cnn",
                detail: format!("expected {0}x{0} images", self.side),
            });
        }
        let a = conv(tape, store, "c1", x, 1, mode)?.relu().max_pool2()?;
        let b = conv(tape, store, "c2", a, 1, mode)?.relu().max_pool2()?;
        let flat = b.reshape(&[n, b.numel() / n])?;
        let feature = linear(tape, store, "fc", flat, mode)?.relu();
        let output = linear(tape, store, "out", feature, mode)?;
        Ok(Forward { output, feature })
    }
}

impl Trainable for ShapeCnn {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Backbone for ShapeCnn {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Single image `[1, side, side]` (or `[side, side]`) → `[classes]`.
    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let img = real("shape_cnn", x)?;
        if img.numel() != self.side * self.side {
            return Err(ModelError::Input {
                model: "shape_cnn",
                detail: format!("expected one {0}x{0} image, got {1:?}", self.side, img.shape()),
            });
        }
        let v = tape.constant(img.clone().reshaped(&[1, 1, self.side, self.side])?);
        let f = self.cnn_batch(store, tape, v, mode)?;
        Ok(Forward {
            output: f.output.reshape(&[self.classes])?,
            feature: f.feature.reshape(&[CNN_FEATURE_DIM])?,
        })
    }

    fn describe(&self) -> String {
        format!("shape_cnn({}x{}, {} classes)", self.side, self.side, self.classes)
    }

    fn supports_batch(&self) -> bool {
        true
    }

    fn forward_batch_with<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        mode: ParamMode,
    ) -> Result<Forward<'t>, ModelError> {
        self.cnn_batch(store, tape, x, mode)
    }
}

/// A classifier with a softmax appended: outputs are class probabilities,
/// so group averaging averages probabilities rather than logits.
#[derive(Clone, Debug)]
pub struct SoftmaxHead<M> {
    pub inner: M,
}

impl<M: Backbone> SoftmaxHead<M> {
    pub fn new(inner: M) -> Self {
        Self { inner }
    }
}

impl<M: Backbone> Backbone for SoftmaxHead<M> {
    fn params(&self) -> &ParamStore {
        self.inner.params()
    }

    fn forward_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: &Point, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let f = self.inner.forward_with(store, tape, x, mode)?;
        Ok(Forward {
            output: f.output.softmax()?,
            feature: f.feature,
        })
    }

    fn describe(&self) -> String {
        format!("softmax({})", self.inner.describe())
    }

    fn supports_batch(&self) -> bool {
        self.inner.supports_batch()
    }

    fn forward_batch_with<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>, mode: ParamMode) -> Result<Forward<'t>, ModelError> {
        let f = self.inner.forward_batch_with(store, tape, x, mode)?;
        Ok(Forward {
            output: f.output.softmax()?,
            feature: f.feature,
        })
    }
}

impl<M: Trainable> Trainable for SoftmaxHead<M> {
    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner.params_mut()
    }
}
