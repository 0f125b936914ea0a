use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::params::{ParamMode, ParamStore};
use super::tensor::Tensor;
use super::DiffError;

static PEAK_TAPE_BYTES: AtomicUsize = AtomicUsize::new(0);

/// Largest value storage held by any single tape since the last reset,
/// across all threads.
pub fn peak_tape_bytes() -> usize {
    PEAK_TAPE_BYTES.load(Ordering::Relaxed)
}

pub fn reset_peak_tape_bytes() {
    PEAK_TAPE_BYTES.store(0, Ordering::Relaxed);
}

/// Backward rule recorded for every node on the tape. Parent references are
/// node ids; ids are assigned in creation order so the tape is already
/// topologically sorted.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        pad: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    WeightedSum {
        values: Vec<usize>,
        weights: Vec<usize>,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(usize, usize),
    Reshape(usize),
    Gather {
        x: usize,
        src: Vec<usize>,
        sign: Option<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct ParamLink {
    node: usize,
    store: u64,
    index: usize,
}

/// A single-threaded reverse-mode computation graph.
///
/// Values are recorded eagerly; [`Tape::backward`] walks the nodes in reverse
/// creation order. A tape is meant to be built for one forward pass and then
/// dropped.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<ParamLink>>,
    allocated: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &node.value.shape())
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(msg: impl Into<String>) -> DiffError {
    DiffError::ShapeMismatch(msg.into())
}

/// How `b` broadcasts against `a`: element `i` of `a` pairs with
/// `b[(i / rep) % nb]`. `b` may be a scalar, a trailing-shape suffix of `a`
/// (`rep = 1`), or a leading prefix of `a` padded with trailing 1s
/// (`[B, 1]` against `[B, C]`).
fn broadcast_rep(a: &[usize], b: &[usize]) -> Option<usize> {
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Some(1);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Some(1);
    }
    let core = b.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if b.len() == a.len() && core < b.len() && a[..core] == b[..core] {
        return Some(a.iter().product::<usize>() / nb);
    }
    None
}

fn rep_of(nodes: &[Node], a: usize, b: usize) -> usize {
    broadcast_rep(nodes[a].value.shape(), nodes[b].value.shape()).expect("checked at construction")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            allocated: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes of value storage allocated by this tape so far.
    pub fn allocated_bytes(&self) -> usize {
        self.allocated.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.allocated
            .set(self.allocated.get() + value.numel() * std::mem::size_of::<f64>());
        PEAK_TAPE_BYTES.fetch_max(self.allocated.get(), Ordering::Relaxed);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Constant input; gradients are never propagated into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that collects a gradient (for input-gradient checks).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a named parameter of `store` as a leaf. Frozen bindings behave
    /// like constants.
    pub fn param(&self, store: &ParamStore, name: &str, mode: ParamMode) -> Var<'_> {
        let index = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let trainable = mode == ParamMode::Train && store.is_trainable(index);
        let var = self.push(store.value_at(index).clone(), Op::Leaf, trainable);
        if trainable {
            self.params.borrow_mut().push(ParamLink {
                node: var.id,
                store: store.id(),
                index,
            });
        }
        var
    }

    pub fn weighted_sum<'t>(
        &'t self,
        values: &[Var<'t>],
        weights: &[Var<'t>],
    ) -> Result<Var<'t>, DiffError> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(mismatch(format!(
                "weighted_sum needs equal non-empty lists, got {} values and {} weights",
                values.len(),
                weights.len()
            )));
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[values[0].id].value.shape().to_vec();
        let mut out = vec![0.0; nodes[values[0].id].value.numel()];
        for (v, w) in values.iter().zip(weights) {
            let vt = &nodes[v.id].value;
            let wt = &nodes[w.id].value;
            if vt.shape() != shape.as_slice() {
                return Err(mismatch("weighted_sum values differ in shape"));
            }
            if wt.numel() != 1 {
                return Err(mismatch("weighted_sum weights must be scalars"));
            }
            let wv = wt.data()[0];
            for (o, x) in out.iter_mut().zip(vt.data()) {
                *o += wv * x;
            }
        }
        let rg = values
            .iter()
            .chain(weights)
            .any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        Ok(self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::WeightedSum {
                values: values.iter().map(|v| v.id).collect(),
                weights: weights.iter().map(|v| v.id).collect(),
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, DiffError> {
        if parts.is_empty() {
            return Err(mismatch("concat of zero tensors"));
        }
        let nodes = self.nodes.borrow();
        let first = nodes[parts[0].id].value.shape().to_vec();
        let lead: Vec<usize> = first[..first.len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = nodes[p.id].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch(format!("concat leading axes differ: {first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&nodes[p.id].value.data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Grads, DiffError> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(DiffError::NonScalarRoot(nodes[root.id].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Grads {
            per_node: grads,
            links: self
                .params
                .borrow()
                .iter()
                .map(|l| (l.node, l.store, l.index))
                .collect(),
        })
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            add_into(grads, nodes, *a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            let nb = nodes[*b].value.numel();
            let rep = rep_of(nodes, *a, *b);
            add_into(grads, nodes, *b, |gb| {
                for (i, y) in g.iter().enumerate() {
                    gb[(i / rep) % nb] += sign * y;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let nb = bv.len();
            let rep = rep_of(nodes, *a, *b);
            add_into(grads, nodes, *a, |ga| {
                for (i, y) in g.iter().enumerate() {
                    ga[i] += y * bv[(i / rep) % nb];
                }
            });
            add_into(grads, nodes, *b, |gb| {
                for (i, y) in g.iter().enumerate() {
                    gb[(i / rep) % nb] += y * av[i];
                }
            });
        }
        Op::Div(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let nb = bv.len();
            let rep = rep_of(nodes, *a, *b);
            add_into(grads, nodes, *a, |ga| {
                for (i, y) in g.iter().enumerate() {
                    ga[i] += y / bv[(i / rep) % nb];
                }
            });
            add_into(grads, nodes, *b, |gb| {
                for (i, y) in g.iter().enumerate() {
                    let d = bv[(i / rep) % nb];
                    gb[(i / rep) % nb] -= y * av[i] / (d * d);
                }
            });
        }
        Op::Scale(a, c) => add_into(grads, nodes, *a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += c * y;
            }
        }),
        Op::Shift(a) | Op::Reshape(a) => add_into(grads, nodes, *a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += y;
            }
        }),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            add_into(grads, nodes, *a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            });
            add_into(grads, nodes, *b, |gb| {
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let row = &g[i * n..(i + 1) * n];
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, y) in dst.iter_mut().zip(row) {
                            *d += x * y;
                        }
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, pad } => {
            let geo = ConvGeometry::new(nodes[*x].value.shape(), nodes[*w].value.shape(), *pad)
                .expect("validated at forward");
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            add_into(grads, nodes, *x, |gx| geo.backward_input(g, wv, gx));
            add_into(grads, nodes, *w, |gw| geo.backward_weight(g, xv, gw));
            add_into(grads, nodes, *b, |gb| {
                let plane = geo.out_h * geo.out_w;
                for nimg in 0..geo.batch {
                    for o in 0..geo.out_c {
                        let base = (nimg * geo.out_c + o) * plane;
                        gb[o] += g[base..base + plane].iter().sum::<f64>();
                    }
                }
            });
        }
        Op::MaxPool2 { x, argmax } => add_into(grads, nodes, *x, |gx| {
            for (y, &src) in g.iter().zip(argmax) {
                gx[src] += y;
            }
        }),
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            add_into(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Tanh(a) => add_into(grads, nodes, *a, |ga| {
            for (i, y) in out.data().iter().enumerate() {
                ga[i] += g[i] * (1.0 - y * y);
            }
        }),
        Op::Sigmoid(a) => add_into(grads, nodes, *a, |ga| {
            for (i, y) in out.data().iter().enumerate() {
                ga[i] += g[i] * y * (1.0 - y);
            }
        }),
        Op::Exp(a) => add_into(grads, nodes, *a, |ga| {
            for (i, y) in out.data().iter().enumerate() {
                ga[i] += g[i] * y;
            }
        }),
        Op::Log(a) => {
            let av = nodes[*a].value.data();
            add_into(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            });
        }
        Op::Softplus(a) => {
            let av = nodes[*a].value.data();
            add_into(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(av[i]);
                }
            });
        }
        Op::Softmax(a) => {
            let width = out.last_dim();
            let y = out.data();
            add_into(grads, nodes, *a, |ga| {
                for r in 0..y.len() / width {
                    let row = r * width..(r + 1) * width;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let width = out.last_dim();
            let y = out.data();
            add_into(grads, nodes, *a, |ga| {
                for r in 0..y.len() / width {
                    let row = r * width..(r + 1) * width;
                    let total: f64 = g[row.clone()].iter().sum();
                    for i in row {
                        ga[i] += g[i] - y[i].exp() * total;
                    }
                }
            });
        }
        Op::Sum(a) => add_into(grads, nodes, *a, |ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        Op::Mean(a) => add_into(grads, nodes, *a, |ga| {
            let n = ga.len() as f64;
            for x in ga.iter_mut() {
                *x += g[0] / n;
            }
        }),
        Op::WeightedSum { values, weights } => {
            for (v, w) in values.iter().zip(weights) {
                let wv = nodes[*w].value.data()[0];
                let vv = nodes[*v].value.data();
                add_into(grads, nodes, *v, |gv| {
                    for (x, y) in gv.iter_mut().zip(g) {
                        *x += wv * y;
                    }
                });
                add_into(grads, nodes, *w, |gw| {
                    gw[0] += g.iter().zip(vv).map(|(a, b)| a * b).sum::<f64>();
                });
            }
        }
        Op::Embed { table, ids } => {
            let dim = nodes[*table].value.last_dim();
            add_into(grads, nodes, *table, |gt| {
                for (t, &id) in ids.iter().enumerate() {
                    for d in 0..dim {
                        gt[id * dim + d] += g[t * dim + d];
                    }
                }
            });
        }
        Op::Concat { parts } => {
            let total = out.last_dim();
            let rows = out.numel() / total;
            let mut offset = 0;
            for p in parts {
                let w = nodes[*p].value.last_dim();
                add_into(grads, nodes, *p, |gp| {
                    for r in 0..rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let width = nodes[*logits].value.last_dim();
            let rows = targets.len() as f64;
            add_into(grads, nodes, *logits, |gl| {
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..width {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * width + c] += g[0] * (probs[r * width + c] - onehot) / rows;
                    }
                }
            });
        }
        Op::Mse(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let n = av.len() as f64;
            add_into(grads, nodes, *a, |ga| {
                for i in 0..av.len() {
                    ga[i] += g[0] * 2.0 * (av[i] - bv[i]) / n;
                }
            });
            add_into(grads, nodes, *b, |gb| {
                for i in 0..av.len() {
                    gb[i] -= g[0] * 2.0 * (av[i] - bv[i]) / n;
                }
            });
        }
        Op::Gather { x, src, sign } => add_into(grads, nodes, *x, |gx| {
            for (i, &s) in src.iter().enumerate() {
                let f = sign.as_ref().map_or(1.0, |sg| sg[i]);
                gx[s] += f * g[i];
            }
        }),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    per_node: Vec<Option<Vec<f64>>>,
    links: Vec<(usize, u64, usize)>,
}

impl Grads {
    /// Gradient with respect to a node, `None` when nothing reached it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.per_node.get(var.id).and_then(|g| g.as_deref())
    }

    /// `(store id, parameter index, gradient)` for every trainable binding.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (u64, usize, &[f64])> {
        self.links.iter().filter_map(|&(node, store, index)| {
            self.per_node[node].as_deref().map(|g| (store, index, g))
        })
    }
}

struct ConvGeometry {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], pad: usize) -> Result<Self, DiffError> {
        let (batch, in_c, h, wd) = match *x {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(mismatch(format!("conv2d input must be [C,H,W] or [N,C,H,W], got {x:?}"))),
        };
        let [out_c, wc, kh, kw] = *w else {
            return Err(mismatch(format!("conv2d kernel must be [O,C,kh,kw], got {w:?}")));
        };
        if wc != in_c {
            return Err(mismatch(format!("conv2d channels: input {in_c}, kernel {wc}")));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d kernel larger than padded input"));
        }
        Ok(Self {
            batch,
            in_c,
            h,
            w: wd,
            out_c,
            kh,
            kw,
            pad,
            out_h: h + 2 * pad - kh + 1,
            out_w: wd + 2 * pad - kw + 1,
        })
    }

    /// Iterates valid (output position, input position) pairs per kernel tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        for i in 0..self.kh {
            for j in 0..self.kw {
                for oh in 0..self.out_h {
                    let ih = oh + i;
                    if ih < self.pad || ih - self.pad >= self.h {
                        continue;
                    }
                    let ih = ih - self.pad;
                    for ow in 0..self.out_w {
                        let iw = ow + j;
                        if iw < self.pad || iw - self.pad >= self.w {
                            continue;
                        }
                        f(i, j, oh, ow, ih, iw - self.pad);
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let plane = self.out_h * self.out_w;
        let mut out = vec![0.0; self.batch * self.out_c * plane];
        for n in 0..self.batch {
            for o in 0..self.out_c {
                let ob = (n * self.out_c + o) * plane;
                out[ob..ob + plane].iter_mut().for_each(|v| *v = b[o]);
                for c in 0..self.in_c {
                    let xb = (n * self.in_c + c) * self.h * self.w;
                    let wb = (o * self.in_c + c) * self.kh * self.kw;
                    self.for_each_tap(|i, j, oh, ow, ih, iw| {
                        out[ob + oh * self.out_w + ow] += w[wb + i * self.kw + j] * x[xb + ih * self.w + iw];
                    });
                }
            }
        }
        out
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let plane = self.out_h * self.out_w;
        for n in 0..self.batch {
            for o in 0..self.out_c {
                let ob = (n * self.out_c + o) * plane;
                for c in 0..self.in_c {
                    let xb = (n * self.in_c + c) * self.h * self.w;
                    let wb = (o * self.in_c + c) * self.kh * self.kw;
                    self.for_each_tap(|i, j, oh, ow, ih, iw| {
                        gx[xb + ih * self.w + iw] += g[ob + oh * self.out_w + ow] * w[wb + i * self.kw + j];
                    });
                }
            }
        }
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let plane = self.out_h * self.out_w;
        for n in 0..self.batch {
            for o in 0..self.out_c {
                let ob = (n * self.out_c + o) * plane;
                for c in 0..self.in_c {
                    let xb = (n * self.in_c + c) * self.h * self.w;
                    let wb = (o * self.in_c + c) * self.kh * self.kw;
                    self.for_each_tap(|i, j, oh, ow, ih, iw| {
                        gw[wb + i * self.kw + j] += g[ob + oh * self.out_w + ow] * x[xb + ih * self.w + iw];
                    });
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.numel(), 1, "item() on tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    fn unary(self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|&x| f(x)).collect();
            (Tensor::new(v.shape().to_vec(), data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape.push(value, op(self.id), rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, DiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let Some(rep) = broadcast_rep(a.shape(), b.shape()) else {
                return Err(mismatch(format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
            };
            let nb = b.numel();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[(i / rep) % nb]))
                .collect();
            (
                Tensor::new(a.shape().to_vec(), data).expect("shape"),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, op(self.id, other.id), rg))
    }

    /// Elementwise sum; `other` may broadcast (scalar, trailing suffix, or `[B, 1]` column).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|&x| c * x).collect();
            (Tensor::new(v.shape().to_vec(), data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape.push(value, Op::Scale(self.id, c), rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::Shift, |x| x + c)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log, f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus, softplus)
    }

    fn rowwise(self, op: fn(usize) -> Op, f: fn(&[f64]) -> Vec<f64>) -> Result<Var<'t>, DiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let width = v.last_dim();
            if width == 0 || v.numel() == 0 {
                return Err(DiffError::EmptyAxis);
            }
            let data: Vec<f64> = v.data().chunks(width).flat_map(f).collect();
            (Tensor::new(v.shape().to_vec(), data).expect("shape"), nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, op(self.id), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>, DiffError> {
        self.rowwise(Op::Softmax, super::tensor::softmax)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>, DiffError> {
        self.rowwise(Op::LogSoftmax, super::tensor::log_softmax)
    }

    pub fn sum(self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            (Tensor::scalar(nodes[self.id].value.data().iter().sum()), nodes[self.id].requires_grad)
        };
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            (Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64), nodes[self.id].requires_grad)
        };
        self.tape.push(value, Op::Mean(self.id), rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`; a 1-D left operand is treated as `[1,k]`
    /// and the result is returned as 1-D.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (value, rg, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (m, k, vector) = match *a.shape() {
                [k] => (1, k, true),
                [m, k] => (m, k, false),
                _ => return Err(mismatch(format!("matmul lhs must be 1-D or 2-D, got {:?}", a.shape()))),
            };
            let [kb, n] = *b.shape() else {
                return Err(mismatch(format!("matmul rhs must be 2-D, got {:?}", b.shape())));
            };
            if kb != k {
                return Err(mismatch(format!("matmul inner dims {k} vs {kb}")));
            }
            let (av, bv) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
            let shape = if vector { vec![n] } else { vec![m, n] };
            (
                Tensor::new(shape, out).expect("shape"),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
                m,
                k,
                n,
            )
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, pad: usize) -> Result<Var<'t>, DiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let w = &nodes[weight.id].value;
            let b = &nodes[bias.id].value;
            let geo = ConvGeometry::new(x.shape(), w.shape(), pad)?;
            if b.numel() != geo.out_c {
                return Err(mismatch(format!("conv2d bias has {} values for {} channels", b.numel(), geo.out_c)));
            }
            let out = geo.forward(x.data(), w.data(), b.data());
            let shape = if x.shape().len() == 3 {
                vec![geo.out_c, geo.out_h, geo.out_w]
            } else {
                vec![geo.batch, geo.out_c, geo.out_h, geo.out_w]
            };
            (
                Tensor::new(shape, out).expect("shape"),
                [self.id, weight.id, bias.id].iter().any(|&i| nodes[i].requires_grad),
            )
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                pad,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over the trailing two axes (even sizes).
    pub fn max_pool2(self) -> Result<Var<'t>, DiffError> {
        let (value, argmax, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let s = x.shape();
            if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
                return Err(mismatch(format!("max_pool2 needs even trailing dims, got {s:?}")));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = x.numel() / (h * w);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(planes * oh * ow);
            let mut arg = Vec::with_capacity(planes * oh * ow);
            let d = x.data();
            for p in 0..planes {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = p * h * w + 2 * i * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        out.push(d[best]);
                        arg.push(best);
                    }
                }
            }
            let mut shape = s.to_vec();
            let len = shape.len();
            shape[len - 2] = oh;
            shape[len - 1] = ow;
            (Tensor::new(shape, out).expect("shape"), arg, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::MaxPool2 { x: self.id, argmax }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.clone().reshaped(shape)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    pub fn flatten(self) -> Var<'t> {
        let n = self.numel();
        self.reshape(&[n]).expect("flatten preserves numel")
    }

    /// Rows of an embedding table `[V, D]` selected by `ids`, shape `[len, D]`.
    pub fn embed(self, ids: &[usize]) -> Result<Var<'t>, DiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let [vocab, dim] = *t.shape() else {
                return Err(mismatch(format!("embedding table must be 2-D, got {:?}", t.shape())));
            };
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(DiffError::IndexOutOfRange { index: id, len: vocab });
                }
                out.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
            }
            (Tensor::new(vec![ids.len(), dim], out).expect("shape"), nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::Embed {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = sign[i] * self[src[i]]` on the flattened value, reshaped to `shape`.
    pub fn gather(self, src: Vec<usize>, sign: Option<Vec<f64>>, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = nodes[self.id].value.data();
            if shape.iter().product::<usize>() != src.len() || sign.as_ref().is_some_and(|s| s.len() != src.len()) {
                return Err(mismatch("gather index list does not match output shape"));
            }
            let mut out = Vec::with_capacity(src.len());
            for (i, &s) in src.iter().enumerate() {
                if s >= x.len() {
                    return Err(DiffError::IndexOutOfRange { index: s, len: x.len() });
                }
                out.push(sign.as_ref().map_or(1.0, |sg| sg[i]) * x[s]);
            }
            (Tensor::new(shape.to_vec(), out).expect("shape"), nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Gather { x: self.id, src, sign }, rg))
    }

    /// Element `idx[r]` of every row of a `[rows, C]` (or `[C]`) tensor, shape `[rows]`.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>, DiffError> {
        let shape = self.shape();
        let width = *shape.last().ok_or(DiffError::EmptyAxis)?;
        let rows = self.numel() / width.max(1);
        if idx.len() != rows {
            return Err(mismatch(format!("pick: {} indices for {rows} rows", idx.len())));
        }
        let mut src = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= width {
                return Err(DiffError::IndexOutOfRange { index: i, len: width });
            }
            src.push(r * width + i);
        }
        self.gather(src, None, &[rows])
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>, DiffError> {
        let mut shape = self.shape();
        let width = *shape.last().ok_or(DiffError::EmptyAxis)?;
        if start + len > width {
            return Err(DiffError::IndexOutOfRange { index: start + len, len: width });
        }
        let rows = self.numel() / width;
        let src = (0..rows).flat_map(|r| (start..start + len).map(move |c| r * width + c)).collect();
        *shape.last_mut().unwrap() = len;
        self.gather(src, None, &shape)
    }

    /// Mean cross-entropy of `[rows, C]` (or `[C]`) logits against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>, DiffError> {
        let (value, probs, rg) = {
            let nodes = self.tape.nodes.borrow();
            let l = &nodes[self.id].value;
            let width = l.last_dim();
            if width == 0 || l.numel() == 0 {
                return Err(DiffError::EmptyAxis);
            }
            let rows = l.numel() / width;
            if targets.len() != rows {
                return Err(mismatch(format!("cross_entropy: {} targets for {rows} rows", targets.len())));
            }
            let mut probs = Vec::with_capacity(l.numel());
            let mut loss = 0.0;
            for (row, &t) in l.data().chunks(width).zip(targets) {
                if t >= width {
                    return Err(DiffError::IndexOutOfRange { index: t, len: width });
                }
                let lsm = super::tensor::log_softmax(row);
                loss -= lsm[t];
                probs.extend(lsm.iter().map(|v| v.exp()));
            }
            (Tensor::scalar(loss / rows as f64), probs, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a same-shaped tensor.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>, DiffError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[target.id].value;
            if a.shape() != b.shape() {
                return Err(mismatch(format!("mse: {:?} vs {:?}", a.shape(), b.shape())));
            }
            let n = a.numel() as f64;
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            (Tensor::scalar(s / n), nodes[self.id].requires_grad || nodes[target.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Mse(self.id, target.id), rg))
    }

    /// Same forward value, no gradient upstream.
    pub fn detach(self) -> Var<'t> {
        let value = self.value();
        self.tape.constant(value)
    }
}
