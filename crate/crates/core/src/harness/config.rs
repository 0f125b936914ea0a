use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::bench::BenchConfig;
use super::fairness::FairnessConfig;
use super::finetune::{FinetuneConfig, WrapperMode};
use super::rl::RlExperimentConfig;
use super::scan::ScanConfig;
use super::vision::VisionConfig;
use super::HarnessError;
use crate::group::GroupDescriptor;
use crate::wrap::{ProxyKind, TrainOpts};

pub const SEED_ENV: &str = "EQUIWRAP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Vision,
    Rl,
    Scan,
    Fairness,
    Universality,
    Bench,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Vision => "vision",
            ExperimentKind::Rl => "rl",
            ExperimentKind::Scan => "scan",
            ExperimentKind::Fairness => "fairness",
            ExperimentKind::Universality => "universality",
            ExperimentKind::Bench => "bench",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniversalityConfig {
    /// `symmetrized_cubic` or `linear_negation`.
    pub fixture: String,
    pub budgets: Vec<usize>,
}

impl Default for UniversalityConfig {
    fn default() -> Self {
        Self {
            fixture: "symmetrized_cubic".into(),
            budgets: vec![300, 1200, 4800],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Wrapper used by `eval` and `finetune`.
    #[serde(default)]
    pub wrapper: WrapperMode,
    #[serde(default = "default_proxy")]
    pub proxy: ProxyKind,
    /// Overrides the group of the vision wrappers when set.
    #[serde(default)]
    pub group: Option<GroupDescriptor>,
    #[serde(default = "TrainOpts::lambda_phase")]
    pub lambda_phase: TrainOpts,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub vision: VisionConfig,
    #[serde(default)]
    pub rl: RlExperimentConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub fairness: FairnessConfig,
    #[serde(default)]
    pub universality: UniversalityConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    /// Checkpoint read by `eval`, `finetune` and `rl-eval`. Relative paths
    /// resolve against the working directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_proxy() -> ProxyKind {
    ProxyKind::NegMaxProb
}

impl RunConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self::from_value(serde_json::json!({ "kind": kind })).expect("defaults are valid")
    }

    pub fn from_value(v: Value) -> Result<Self, HarnessError> {
        let c: Self = serde_json::from_value(v).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Parses a config document, applies `key=value` overrides (dotted keys
    /// reach nested fields) and validates the result.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config is not JSON: {e}")))?;
        if !v.is_object() {
            return Err(HarnessError::Config("config must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        // partial nested objects fill in from the defaults of their parent
        let kind: ExperimentKind = serde_json::from_value(v.get("kind").cloned().unwrap_or(Value::Null))
            .map_err(|e| HarnessError::Config(format!("kind: {e}")))?;
        let mut base = serde_json::to_value(Self::new(kind)).expect("config serializes");
        merge(&mut base, v);
        Self::from_value(base)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if let Some(g) = &self.group {
            g.build()?;
        }
        if self.vision.batch == 0 || self.vision.train_size == 0 || self.vision.test_size == 0 {
            return bad("vision sizes must be positive");
        }
        if self.scan.batch == 0 {
            return bad("scan.batch must be positive");
        }
        if self.finetune.batch == 0 || self.finetune.examples == 0 {
            return bad("finetune sizes must be positive");
        }
        if self.rl.side < 5 || self.rl.side % 2 == 0 {
            return bad("rl.side must be odd and at least 5");
        }
        if self.rl.dqn.batch == 0 || self.rl.dqn.buffer < self.rl.dqn.batch {
            return bad("rl.dqn.buffer must hold at least one batch");
        }
        if self.universality.budgets.is_empty() || self.universality.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return bad("universality.budgets must be non-empty and increasing");
        }
        if !["symmetrized_cubic", "linear_negation"].contains(&self.universality.fixture.as_str()) {
            return bad("universality.fixture must be symmetrized_cubic or linear_negation");
        }
        if self.bench.reps < 10 {
            return bad("bench.reps must be at least 10");
        }
        if ![1, 4].contains(&self.bench.order) {
            return bad("bench.order must be 1 or 4");
        }
        Ok(())
    }

    /// Replaces the seed list by the value of `EQUIWRAP_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is read as JSON and falls back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for p in &path[..path.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key:?} walks into a non-object")))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
    }
    cur.as_object_mut()
        .ok_or_else(|| HarnessError::Config(format!("override {key:?} walks into a non-object")))?
        .insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
