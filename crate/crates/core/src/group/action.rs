use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FiniteGroup, Structure};
use crate::diff::{DiffError, Tensor, Var};

/// A point of one of the data spaces the built-in actions know about.
#[derive(Clone, Debug, PartialEq)]
pub enum Point {
    /// Images `[.., H, W]`, logit vectors, Q-value vectors, coordinates.
    Real(Tensor),
    /// Token-id sequences.
    Tokens(Vec<usize>),
}

impl Point {
    pub fn as_real(&self) -> Option<&Tensor> {
        match self {
            Point::Real(t) => Some(t),
            Point::Tokens(_) => None,
        }
    }

    pub fn as_tokens(&self) -> Option<&[usize]> {
        match self {
            Point::Tokens(t) => Some(t),
            Point::Real(_) => None,
        }
    }
}

impl From<Tensor> for Point {
    fn from(t: Tensor) -> Self {
        Point::Real(t)
    }
}

/// The built-in group actions. Each one is defined by a generator; group
/// element `k` of a cyclic group acts as the generator applied `k` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    /// Every element acts as the identity.
    Trivial,
    /// 90° counter-clockwise rotation of the trailing two (square) axes:
    /// `[[1,2],[3,4]] -> [[2,4],[1,3]]`.
    Rot90Image,
    /// Left-right mirror of the trailing axis of an image.
    HflipImage,
    /// `x -> -x`.
    Negate,
    /// `(x, y) -> (-y, x)` on a trailing axis of length 2.
    PlaneRot90,
    /// Swaps the listed token ids in sequences and the matching positions of
    /// vectors indexed by token id (logits).
    TokenSwap { pairs: Vec<[usize; 2]> },
    /// Advances every tuple member to the next one, cyclically.
    VocabCycle { tuples: Vec<Vec<usize>> },
    /// Index `a` of the trailing axis moves to `generator[a]`.
    ActionPerm { generator: Vec<usize> },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ActionError {
    #[error("element {element} out of range for group of order {order}")]
    ElementOutOfRange { element: usize, order: usize },
    #[error("action {action} does not apply to this point: {detail}")]
    SpaceMismatch { action: &'static str, detail: String },
    #[error("action {action} has order {generator_order}, incompatible with group {group}")]
    IncompatibleGroup {
        action: &'static str,
        generator_order: usize,
        group: String,
    },
    #[error("invalid action definition: {0}")]
    Invalid(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `out[i] = sign[i] · in[src[i]]` on flattened data.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedPerm {
    pub src: Vec<usize>,
    pub sign: Option<Vec<f64>>,
}

impl SignedPerm {
    fn identity(n: usize) -> Self {
        Self {
            src: (0..n).collect(),
            sign: None,
        }
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        match &self.sign {
            None => self.src.iter().map(|&s| data[s]).collect(),
            Some(sign) => self.src.iter().zip(sign).map(|(&s, f)| f * data[s]).collect(),
        }
    }
}

/// A group together with a realisation of its elements on a data space.
#[derive(Clone, Debug)]
pub struct GroupAction {
    group: Arc<FiniteGroup>,
    kind: ActionKind,
    /// `index_powers[k][v]` = image of index/token `v` under generator^k.
    index_powers: Vec<Vec<usize>>,
}

impl PartialEq for GroupAction {
    fn eq(&self, other: &Self) -> bool {
        self.group == other.group && self.kind == other.kind
    }
}

fn permutation_powers(next: Vec<usize>) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (0..next.len()).collect();
    let mut powers = vec![identity.clone()];
    let mut cur = next.clone();
    while cur != identity {
        powers.push(cur.clone());
        cur = cur.iter().map(|&v| next[v]).collect();
    }
    powers
}

impl GroupAction {
    pub fn new(group: impl Into<Arc<FiniteGroup>>, kind: ActionKind) -> Result<Self, ActionError> {
        let group = group.into();
        let index_powers = match &kind {
            ActionKind::TokenSwap { pairs } => {
                let tuples: Vec<Vec<usize>> = pairs.iter().map(|p| p.to_vec()).collect();
                permutation_powers(cycle_map(&tuples)?)
            }
            ActionKind::VocabCycle { tuples } => {
                if let Some(d) = tuples.first().map(Vec::len) {
                    if d == 0 || tuples.iter().any(|t| t.len() != d) {
                        return Err(ActionError::Invalid("vocab_cycle tuples must share one positive length".into()));
                    }
                }
                permutation_powers(cycle_map(tuples)?)
            }
            ActionKind::ActionPerm { generator } => {
                let mut seen = vec![false; generator.len()];
                for &v in generator {
                    if v >= generator.len() || std::mem::replace(&mut seen[v], true) {
                        return Err(ActionError::Invalid(format!("{generator:?} is not a permutation")));
                    }
                }
                permutation_powers(generator.clone())
            }
            _ => Vec::new(),
        };
        let action = Self {
            group,
            kind,
            index_powers,
        };
        let gen_order = action.generator_order();
        if gen_order > 1 || !matches!(action.kind, ActionKind::Trivial) {
            let compatible = match action.group.structure() {
                Structure::Cyclic(n) => n % gen_order == 0,
                _ => gen_order == 1,
            };
            if !compatible {
                return Err(ActionError::IncompatibleGroup {
                    action: action.name(),
                    generator_order: gen_order,
                    group: action.group.label().to_string(),
                });
            }
        }
        Ok(action)
    }

    /// Convenience constructor over a fresh cyclic group.
    pub fn cyclic(n: usize, kind: ActionKind) -> Result<Self, ActionError> {
        let g = FiniteGroup::cyclic(n).map_err(|e| ActionError::Invalid(e.to_string()))?;
        Self::new(g, kind)
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn group_arc(&self) -> Arc<FiniteGroup> {
        Arc::clone(&self.group)
    }

    pub fn kind(&self) -> &ActionKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ActionKind::Trivial => "trivial",
            ActionKind::Rot90Image => "rot90_image",
            ActionKind::HflipImage => "hflip_image",
            ActionKind::Negate => "negate",
            ActionKind::PlaneRot90 => "plane_rot90",
            ActionKind::TokenSwap { .. } => "token_swap",
            ActionKind::VocabCycle { .. } => "vocab_cycle",
            ActionKind::ActionPerm { .. } => "action_perm",
        }
    }

    /// Order of the generating transformation.
    pub fn generator_order(&self) -> usize {
        match self.kind {
            ActionKind::Trivial => 1,
            ActionKind::Rot90Image | ActionKind::PlaneRot90 => 4,
            ActionKind::HflipImage | ActionKind::Negate => 2,
            _ => self.index_powers.len(),
        }
    }

    /// Whether every element acts as the identity.
    pub fn is_trivial(&self) -> bool {
        self.generator_order() == 1
    }

    fn power(&self, g: usize) -> Result<usize, ActionError> {
        let order = self.group.order();
        if g >= order {
            return Err(ActionError::ElementOutOfRange { element: g, order });
        }
        Ok(if self.is_trivial() { 0 } else { g % self.generator_order() })
    }

    /// Image of a token id under element `g`.
    pub fn map_token(&self, g: usize, token: usize) -> Result<usize, ActionError> {
        let k = self.power(g)?;
        Ok(match self.index_powers.get(k) {
            Some(map) if token < map.len() => map[token],
            _ => token,
        })
    }

    /// `g·x`.
    pub fn act(&self, g: usize, x: &Point) -> Result<Point, ActionError> {
        match x {
            Point::Real(t) => Ok(Point::Real(self.act_tensor(g, t)?)),
            Point::Tokens(ids) => Ok(Point::Tokens(self.act_tokens(g, ids)?)),
        }
    }

    pub fn act_tensor(&self, g: usize, x: &Tensor) -> Result<Tensor, ActionError> {
        let perm = self.signed_perm(g, x.shape())?;
        Ok(Tensor::new(x.shape().to_vec(), perm.apply(x.data()))?)
    }

    pub fn act_tokens(&self, g: usize, ids: &[usize]) -> Result<Vec<usize>, ActionError> {
        match self.kind {
            ActionKind::Trivial => {
                self.power(g)?;
                Ok(ids.to_vec())
            }
            ActionKind::TokenSwap { .. } | ActionKind::VocabCycle { .. } => {
                ids.iter().map(|&t| self.map_token(g, t)).collect()
            }
            _ => Err(ActionError::SpaceMismatch {
                action: self.name(),
                detail: "token sequences are not in this action's space".into(),
            }),
        }
    }

    /// Differentiable `g·v` for real-valued outputs.
    pub fn act_var<'t>(&self, g: usize, v: Var<'t>) -> Result<Var<'t>, ActionError> {
        let shape = v.shape();
        let perm = self.signed_perm(g, &shape)?;
        if perm.sign.is_none() && perm.src.iter().enumerate().all(|(i, &s)| i == s) {
            return Ok(v);
        }
        Ok(v.gather(perm.src, perm.sign, &shape)?)
    }

    /// The signed permutation realising element `g` on real data of `shape`.
    pub fn signed_perm(&self, g: usize, shape: &[usize]) -> Result<SignedPerm, ActionError> {
        let k = self.power(g)?;
        let n: usize = shape.iter().product();
        if k == 0 {
            return Ok(SignedPerm::identity(n));
        }
        let mismatch = |detail: String| ActionError::SpaceMismatch {
            action: self.name(),
            detail,
        };
        match &self.kind {
            ActionKind::Trivial => Ok(SignedPerm::identity(n)),
            ActionKind::Rot90Image | ActionKind::HflipImage => {
                if shape.len() < 2 {
                    return Err(mismatch(format!("needs an image [.., H, W], got {shape:?}")));
                }
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let rotate = matches!(self.kind, ActionKind::Rot90Image);
                if rotate && h != w {
                    return Err(mismatch(format!("rotation needs a square image, got {h}x{w}")));
                }
                let planes = if h * w == 0 { 0 } else { n / (h * w) };
                let mut src = Vec::with_capacity(n);
                for p in 0..planes {
                    for i in 0..h {
                        for j in 0..w {
                            let (si, sj) = match (rotate, k) {
                                (true, 1) => (j, w - 1 - i),
                                (true, 2) => (h - 1 - i, w - 1 - j),
                                (true, _) => (w - 1 - j, i),
                                (false, _) => (i, w - 1 - j),
                            };
                            src.push(p * h * w + si * w + sj);
                        }
                    }
                }
                Ok(SignedPerm { src, sign: None })
            }
            ActionKind::Negate => Ok(SignedPerm {
                src: (0..n).collect(),
                sign: Some(vec![-1.0; n]),
            }),
            ActionKind::PlaneRot90 => {
                if shape.last() != Some(&2) {
                    return Err(mismatch(format!("needs a trailing axis of length 2, got {shape:?}")));
                }
                let mut src = Vec::with_capacity(n);
                let mut sign = Vec::with_capacity(n);
                for r in 0..n / 2 {
                    let (x, y) = (2 * r, 2 * r + 1);
                    let (s0, f0, s1, f1) = match k {
                        1 => (y, -1.0, x, 1.0),
                        2 => (x, -1.0, y, -1.0),
                        _ => (y, 1.0, x, -1.0),
                    };
                    src.extend([s0, s1]);
                    sign.extend([f0, f1]);
                }
                Ok(SignedPerm { src, sign: Some(sign) })
            }
            ActionKind::TokenSwap { .. } | ActionKind::VocabCycle { .. } | ActionKind::ActionPerm { .. } => {
                let width = *shape.last().ok_or_else(|| mismatch("scalar has no index axis".into()))?;
                let forward = &self.index_powers[k];
                if matches!(self.kind, ActionKind::ActionPerm { .. }) && width != forward.len() {
                    return Err(mismatch(format!("permutes {} indices, axis has {width}", forward.len())));
                }
                if forward.len() > width {
                    return Err(mismatch(format!("token id {} exceeds axis length {width}", forward.len() - 1)));
                }
                // out[σ(v)] = in[v]
                let mut inv: Vec<usize> = (0..width).collect();
                for (v, &to) in forward.iter().enumerate() {
                    inv[to] = v;
                }
                let src = (0..n / width.max(1))
                    .flat_map(|r| inv.iter().map(move |&v| r * width + v))
                    .collect();
                Ok(SignedPerm { src, sign: None })
            }
        }
    }
}

/// `next[v]` = successor of `v` within its tuple; identity elsewhere.
fn cycle_map(tuples: &[Vec<usize>]) -> Result<Vec<usize>, ActionError> {
    let mut seen = HashSet::new();
    let max = tuples.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut next: Vec<usize> = (0..max).collect();
    for t in tuples {
        for (i, &v) in t.iter().enumerate() {
            if !seen.insert(v) {
                return Err(ActionError::Invalid(format!("token {v} appears in more than one position")));
            }
            next[v] = t[(i + 1) % t.len()];
        }
    }
    Ok(next)
}
