use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::models::Backbone;
use crate::rl::{dqn_train, policy_eval, rollout, BalanceEnv, DqnConfig, DqnRun, Env, EnvKind, Gridworld, PolicyKind, StartSet};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlExperimentConfig {
    pub env: EnvKind,
    /// Gridworld side (odd, at least 5).
    pub side: usize,
    /// Start cells used while training; evaluation always starts everywhere.
    pub train_starts: StartSet,
    /// Evaluation episodes for the balance task.
    pub episodes: usize,
    pub dqn: DqnConfig,
}

impl Default for RlExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Gridworld,
            side: 7,
            train_starts: StartSet::Quadrant,
            episodes: 20,
            dqn: DqnConfig {
                steps: 30000,
                lr: 1e-3,
                hidden: 128,
                train_every: 2,
                ..DqnConfig::default()
            },
        }
    }
}

pub const POLICIES: [PolicyKind; 3] = [PolicyKind::Greedy, PolicyKind::Equitune, PolicyKind::Equizero];

pub fn train(cfg: &RlExperimentConfig, seed: u64) -> Result<DqnRun, HarnessError> {
    Ok(match cfg.env {
        EnvKind::Gridworld => dqn_train(&Gridworld::new(cfg.side, cfg.train_starts), &cfg.dqn, seed)?,
        EnvKind::Balance => dqn_train(&BalanceEnv::default(), &cfg.dqn, seed)?,
    })
}

/// Mean return of each policy: over every start cell of the gridworld, or
/// over seeded episodes of the balance task.
pub fn evaluate(q: &dyn Backbone, cfg: &RlExperimentConfig, seed: u64) -> Result<BTreeMap<String, f64>, HarnessError> {
    let mut out = BTreeMap::new();
    for kind in POLICIES {
        let (mean, std) = match cfg.env {
            EnvKind::Gridworld => {
                let env = Gridworld::new(cfg.side, StartSet::All);
                let mut returns = Vec::new();
                for cell in env.start_cells(StartSet::All) {
                    let mut e = env.clone();
                    e.place(cell);
                    returns.push(rollout(kind, q, &mut e)?.0);
                }
                let s = crate::rl::EvalStats::from_returns(&returns);
                (s.mean, s.std)
            }
            EnvKind::Balance => {
                let s = policy_eval(kind, q, &BalanceEnv::default(), cfg.episodes, &mut substream(seed, "rl.eval"))?;
                (s.mean, s.std)
            }
        };
        let name = match kind {
            PolicyKind::Greedy => "raw",
            other => other.name(),
        };
        out.insert(format!("{name}_return"), mean);
        out.insert(format!("{name}_return_std"), std);
    }
    Ok(out)
}

pub fn observation_size(cfg: &RlExperimentConfig) -> usize {
    match cfg.env {
        EnvKind::Gridworld => Gridworld::new(cfg.side, StartSet::All).observe().numel(),
        EnvKind::Balance => BalanceEnv::default().observe().numel(),
    }
}
