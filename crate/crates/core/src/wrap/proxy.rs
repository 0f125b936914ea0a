use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::WrapError;
use crate::diff::softmax;

/// Scalar score of one backbone output; equizero keeps the branch with the
/// lowest value.
#[derive(Clone)]
pub enum ProxyLoss {
    NegMaxProb,
    Entropy,
    NegMaxSoftmaxQ,
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for ProxyLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Serializable choice of a built-in proxy loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    NegMaxProb,
    Entropy,
    NegMaxSoftmaxQ,
}

impl From<ProxyKind> for ProxyLoss {
    fn from(k: ProxyKind) -> Self {
        match k {
            ProxyKind::NegMaxProb => ProxyLoss::NegMaxProb,
            ProxyKind::Entropy => ProxyLoss::Entropy,
            ProxyKind::NegMaxSoftmaxQ => ProxyLoss::NegMaxSoftmaxQ,
        }
    }
}

impl ProxyLoss {
    pub fn name(&self) -> &'static str {
        match self {
            ProxyLoss::NegMaxProb => "neg_max_prob",
            ProxyLoss::Entropy => "entropy",
            ProxyLoss::NegMaxSoftmaxQ => "neg_max_softmax_q",
            ProxyLoss::Custom(_) => "custom",
        }
    }

    pub fn evaluate(&self, values: &[f64]) -> Result<f64, WrapError> {
        match self {
            ProxyLoss::NegMaxProb => neg_max_prob(values),
            ProxyLoss::Entropy => entropy(values),
            ProxyLoss::NegMaxSoftmaxQ => neg_max_softmax_q(values),
            ProxyLoss::Custom(f) => Ok(f(values)),
        }
    }
}

fn nonempty(values: &[f64]) -> Result<(), WrapError> {
    if values.is_empty() {
        Err(WrapError::EmptyOutput)
    } else {
        Ok(())
    }
}

/// `−max softmax(logits)`.
pub fn neg_max_prob(logits: &[f64]) -> Result<f64, WrapError> {
    nonempty(logits)?;
    Ok(-softmax(logits).into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// `−Σ p log p` of `softmax(logits)`.
pub fn entropy(logits: &[f64]) -> Result<f64, WrapError> {
    nonempty(logits)?;
    Ok(-softmax(logits)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// `−max_a softmax(q)_a`: the negated largest normalized Q-value.
pub fn neg_max_softmax_q(q: &[f64]) -> Result<f64, WrapError> {
    neg_max_prob(q)
}
