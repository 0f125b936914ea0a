//! Experiment orchestration.

pub mod bench;
pub mod config;
pub mod fairness;
pub mod finetune;
pub mod rl;
pub mod run;
pub mod scan;
pub mod vision;

pub use bench::{bench_wrappers, BenchConfig, BenchRow, BenchTable};
pub use config::{apply_override, ExperimentKind, RunConfig, UniversalityConfig, SEED_ENV};
pub use finetune::{FinetuneConfig, WrapperMode};
pub use run::{execute, Command, CurveRow, RunOutput, RunSummary, SeedMetrics, SeedOutcome, Stat};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error(transparent)]
    Wrap(#[from] crate::wrap::WrapError),
    #[error(transparent)]
    Action(#[from] crate::group::ActionError),
    #[error(transparent)]
    Rl(#[from] crate::rl::RlError),
    #[error(transparent)]
    Seq(#[from] crate::seqlm::SeqError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("this command needs a checkpoint (set \"checkpoint\" in the config)")]
    MissingCheckpoint,
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}
