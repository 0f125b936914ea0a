use serde::{Deserialize, Serialize};

use super::dqn::RlError;
use super::env::Env;
use crate::diff::{argmax, Tensor};
use crate::group::Point;
use crate::models::Backbone;
use crate::rng::StreamRng;
use crate::wrap::{self, EquiConfig, ProxyLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Greedy,
    Equitune,
    Equizero,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Greedy => "greedy",
            PolicyKind::Equitune => "equitune",
            PolicyKind::Equizero => "equizero",
        }
    }
}

pub fn greedy_act(q: &dyn Backbone, obs: &Tensor) -> Result<usize, RlError> {
    Ok(argmax(q.predict(&Point::Real(obs.clone()))?.data()))
}

fn wrapped_act<E: Env>(q: &dyn Backbone, env: &E, c: EquiConfig) -> Result<usize, RlError> {
    let out = wrap::predict(q, &c, &Point::Real(env.observe()))?;
    Ok(argmax(out.data()))
}

/// Greedy action of the group-averaged Q-values.
pub fn equitune_act<E: Env>(q: &dyn Backbone, env: &E) -> Result<usize, RlError> {
    wrapped_act(q, env, EquiConfig::equitune(env.state_action(), env.action_action()))
}

/// Greedy action of the Q-values from the branch whose normalized Q is most
/// peaked.
pub fn equizero_act<E: Env>(q: &dyn Backbone, env: &E) -> Result<usize, RlError> {
    wrapped_act(q, env, EquiConfig::equizero(env.state_action(), env.action_action(), ProxyLoss::NegMaxSoftmaxQ))
}

pub fn act<E: Env>(kind: PolicyKind, q: &dyn Backbone, env: &E) -> Result<usize, RlError> {
    match kind {
        PolicyKind::Greedy => greedy_act(q, &env.observe()),
        PolicyKind::Equitune => equitune_act(q, env),
        PolicyKind::Equizero => equizero_act(q, env),
    }
}

/// Runs one episode from the environment's current state; returns the
/// undiscounted return and the episode length.
pub fn rollout<E: Env>(kind: PolicyKind, q: &dyn Backbone, env: &mut E) -> Result<(f64, usize), RlError> {
    let (mut total, mut len) = (0.0, 0);
    loop {
        let a = act(kind, q, env)?;
        let s = env.step(a);
        total += s.reward;
        len += 1;
        if s.done {
            return Ok((total, len));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

impl EvalStats {
    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            episodes: returns.len(),
        }
    }
}

/// Mean return over `episodes` episodes started by `reset`.
pub fn policy_eval<E: Env>(
    kind: PolicyKind,
    q: &dyn Backbone,
    env: &E,
    episodes: usize,
    rng: &mut StreamRng,
) -> Result<EvalStats, RlError> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut e = env.clone();
        e.reset(rng);
        returns.push(rollout(kind, q, &mut e)?.0);
    }
    Ok(EvalStats::from_returns(&returns))
}
