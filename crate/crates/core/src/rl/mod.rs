//! Symmetric toy environments, DQN pretraining and symmetrized greedy
//! policies over a Q-network.

mod dqn;
mod env;
mod policy;

pub use dqn::{dqn_train, q_network, CurvePoint, DqnConfig, DqnRun, RlError};
pub use env::{BalanceEnv, Env, EnvKind, Gridworld, StartSet, Step};
pub use policy::{act, equitune_act, equizero_act, greedy_act, policy_eval, rollout, EvalStats, PolicyKind};

#[cfg(test)]
mod tests;
