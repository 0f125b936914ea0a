use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bench::run_bench;
use super::config::{ExperimentKind, RunConfig};
use super::finetune::{finetune, load_cnn, wrapper_config, WrapperMode};
use super::vision::{accuracy, fit_lambda, pretrain_cnn};
use super::{fairness, rl, scan, vision, HarnessError};
use crate::data::{gen_shapes, ShapeSplit};
use crate::diff::{peak_tape_bytes, reset_peak_tape_bytes};
use crate::models::{Backbone, SoftmaxHead, Trainable};
use crate::rl::{q_network, Env, Gridworld, StartSet, BalanceEnv, EnvKind};
use crate::rng::substream;
use crate::wrap::{universality_curve, EquiConfig, Lambda, UniversalityFixture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Pretrain,
    Eval,
    Finetune,
    RlTrain,
    RlEval,
    ScanRun,
    Generate,
    Universality,
    Bench,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Pretrain,
        Command::Eval,
        Command::Finetune,
        Command::RlTrain,
        Command::RlEval,
        Command::ScanRun,
        Command::Generate,
        Command::Universality,
        Command::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Eval => "eval",
            Command::Finetune => "finetune",
            Command::RlTrain => "rl-train",
            Command::RlEval => "rl-eval",
            Command::ScanRun => "scan-run",
            Command::Generate => "generate",
            Command::Universality => "universality",
            Command::Bench => "bench",
        }
    }

    pub fn kind(self) -> ExperimentKind {
        match self {
            Command::Pretrain | Command::Eval | Command::Finetune => ExperimentKind::Vision,
            Command::RlTrain | Command::RlEval => ExperimentKind::Rl,
            Command::ScanRun => ExperimentKind::Scan,
            Command::Generate => ExperimentKind::Fairness,
            Command::Universality => ExperimentKind::Universality,
            Command::Bench => ExperimentKind::Bench,
        }
    }

    fn needs_checkpoint(self) -> bool {
        matches!(self, Command::Eval | Command::Finetune | Command::RlEval)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub series: String,
    pub step: usize,
    pub value: f64,
}

/// Everything one seed produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub curve: Vec<CurveRow>,
    /// Extra artifacts as `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub command: Command,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seeds: Vec<SeedMetrics>,
    pub aggregate: BTreeMap<String, Stat>,
    pub wall_clock_s: f64,
    /// Largest tape value storage seen during the run.
    pub peak_memory_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub outcomes: Vec<SeedOutcome>,
}

impl RunOutput {
    /// `seed,<metric>...`, one row per seed. Bench runs list one row per
    /// wrapper instead.
    pub fn metrics_csv(&self) -> String {
        if self.summary.command == Command::Bench {
            return bench_csv(&self.outcomes);
        }
        let mut names: Vec<&String> = self.outcomes.iter().flat_map(|o| o.metrics.keys()).collect();
        names.sort();
        names.dedup();
        let mut s = String::from("seed");
        for n in &names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for o in &self.outcomes {
            let _ = write!(s, "{}", o.seed);
            for n in &names {
                match o.metrics.get(*n) {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// `seed,series,step,value`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("seed,series,step,value\n");
        for o in &self.outcomes {
            for r in &o.curve {
                let _ = writeln!(s, "{},{},{},{}", o.seed, r.series, r.step, r.value);
            }
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes") + "\n"
    }

    /// Writes metrics.csv, curve.csv, summary.json and every seed artifact.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("curve.csv"), self.curve_csv())?;
        fs::write(dir.join("summary.json"), self.summary_json())?;
        for o in &self.outcomes {
            for (name, text) in &o.files {
                fs::write(dir.join(name), text)?;
            }
        }
        Ok(())
    }
}

const BENCH_STATS: [&str; 4] = ["median_s", "iqr_s", "mean_s", "memory_bytes"];

fn bench_csv(outcomes: &[SeedOutcome]) -> String {
    let mut s = String::from("seed,wrapper,median_s,iqr_s,mean_s,memory_bytes,slowdown\n");
    for o in outcomes {
        for w in ["equitune", "equizero", "lambda"] {
            let get = |k: &str| o.metrics.get(&format!("{w}_{k}")).copied().unwrap_or(f64::NAN);
            let _ = write!(s, "{},{w}", o.seed);
            for k in BENCH_STATS {
                let _ = write!(s, ",{}", get(k));
            }
            let _ = writeln!(s, ",{}", get("median_s") / o.metrics.get("bare_median_s").copied().unwrap_or(f64::NAN));
        }
    }
    s
}

fn aggregate(outcomes: &[SeedOutcome]) -> BTreeMap<String, Stat> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for o in outcomes {
        for (k, v) in &o.metrics {
            by.entry(k.clone()).or_default().push(*v);
        }
    }
    by.into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            (k, Stat { mean, std, n: v.len() })
        })
        .collect()
}

/// `{seed}` in a checkpoint path is replaced by the seed.
pub fn checkpoint_path(cfg: &RunConfig, seed: u64) -> Result<PathBuf, HarnessError> {
    let p = cfg.checkpoint.as_ref().ok_or(HarnessError::MissingCheckpoint)?;
    Ok(PathBuf::from(p.to_string_lossy().replace("{seed}", &seed.to_string())))
}

fn read_checkpoint(cfg: &RunConfig, seed: u64) -> Result<String, HarnessError> {
    let p = checkpoint_path(cfg, seed)?;
    fs::read_to_string(&p).map_err(|e| HarnessError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
}

fn curve_rows(series: &str, values: impl IntoIterator<Item = f64>) -> Vec<CurveRow> {
    values
        .into_iter()
        .enumerate()
        .map(|(step, value)| CurveRow {
            series: series.into(),
            step,
            value,
        })
        .collect()
}

fn vision_wrapper(cfg: &RunConfig, model: &dyn Backbone, seed: u64) -> Result<EquiConfig, HarnessError> {
    let mut c = wrapper_config(cfg.wrapper, cfg.proxy, seed)?;
    if let Some(d) = &cfg.group {
        let (input, output) = d.build()?;
        c.input = input;
        c.output = output;
    }
    if cfg.wrapper == WrapperMode::Lambda {
        let fitted = fit_lambda(model, &cfg.vision, &cfg.lambda_phase, seed)?;
        c.lambda = fitted.lambda;
    }
    Ok(c)
}

fn score_vision(cfg: &RunConfig, model: &crate::models::ShapeCnn, c: &EquiConfig, seed: u64) -> Result<BTreeMap<String, f64>, HarnessError> {
    let upright = gen_shapes(seed, cfg.vision.test_size, ShapeSplit::TestUpright);
    let rotated = gen_shapes(seed, cfg.vision.test_size, ShapeSplit::TestRot90);
    let probs = SoftmaxHead::new(model.clone());
    // averaging runs on probabilities, selection and λ on logits
    let b: &dyn Backbone = if cfg.wrapper == WrapperMode::Equitune { &probs } else { model };
    let mut m = BTreeMap::new();
    m.insert("raw_accuracy_upright".into(), accuracy(model, None, &upright)?);
    m.insert("raw_accuracy_rot90".into(), accuracy(model, None, &rotated)?);
    m.insert("accuracy_upright".into(), accuracy(b, Some(c), &upright)?);
    m.insert("accuracy_rot90".into(), accuracy(b, Some(c), &rotated)?);
    Ok(m)
}

fn run_one(cmd: Command, cfg: &RunConfig, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let mut out = SeedOutcome {
        seed,
        metrics: BTreeMap::new(),
        curve: Vec::new(),
        files: Vec::new(),
    };
    match cmd {
        Command::Pretrain => {
            let (model, curve) = pretrain_cnn(&cfg.vision, seed)?;
            out.metrics = vision::evaluate(&model, &cfg.vision, &cfg.lambda_phase, seed, curve.last().copied())?;
            out.curve = curve_rows("train_loss", curve);
            out.files.push((format!("checkpoint_seed{seed}.json"), model.params().to_checkpoint_json()?));
        }
        Command::Eval => {
            let model = load_cnn(&read_checkpoint(cfg, seed)?)?;
            let c = vision_wrapper(cfg, &model, seed)?;
            out.metrics = score_vision(cfg, &model, &c, seed)?;
        }
        Command::Finetune => {
            let model = load_cnn(&read_checkpoint(cfg, seed)?)?;
            let run = finetune(&model, cfg.wrapper, cfg.proxy, &cfg.finetune, &cfg.lambda_phase, seed)?;
            out.metrics = score_vision(cfg, &run.model, &run.config, seed)?;
            if let Some((_, l)) = run.curve.last() {
                out.metrics.insert("final_loss".into(), *l);
            }
            for (phase, series) in [(1, "lambda_loss"), (2, "finetune_loss")] {
                out.curve.extend(curve_rows(series, run.curve.iter().filter(|(p, _)| *p == phase).map(|(_, l)| *l)));
            }
            out.files.push((format!("finetuned_seed{seed}.json"), run.model.params().to_checkpoint_json()?));
            if let Some(net) = run.config.lambda.as_ref().and_then(Lambda::net) {
                out.files.push((format!("lambda_seed{seed}.json"), net.params().to_checkpoint_json()?));
            }
        }
        Command::RlTrain => {
            let run = rl::train(&cfg.rl, seed)?;
            out.metrics = rl::evaluate(&run.qnet, &cfg.rl, seed)?;
            for p in &run.curve {
                out.curve.push(CurveRow { series: "td_loss".into(), step: p.step, value: p.loss });
                out.curve.push(CurveRow { series: "train_return".into(), step: p.step, value: p.eval_return });
            }
            out.files.push((format!("qnet_seed{seed}.json"), run.qnet.params().to_checkpoint_json()?));
        }
        Command::RlEval => {
            let actions = match cfg.rl.env {
                EnvKind::Gridworld => Gridworld::new(cfg.rl.side, StartSet::All).num_actions(),
                EnvKind::Balance => BalanceEnv::default().num_actions(),
            };
            let mut q = q_network(rl::observation_size(&cfg.rl), actions, cfg.rl.dqn.hidden, &mut substream(seed, "dqn.init"));
            q.params_mut().load_checkpoint_json(&read_checkpoint(cfg, seed)?)?;
            out.metrics = rl::evaluate(&q, &cfg.rl, seed)?;
        }
        Command::ScanRun => {
            let corpus = crate::data::gen_scan(cfg.scan.split, seed);
            let (model, curve) = scan::train_seq2seq(&corpus, &cfg.scan, seed)?;
            out.metrics = scan::evaluate(&model, &corpus, &cfg.scan)?;
            out.metrics.insert("train_loss".into(), curve.last().copied().unwrap_or(f64::NAN));
            out.curve = curve_rows("train_loss", curve);
        }
        Command::Generate => {
            let run = fairness::run_seed(&cfg.fairness, seed)?;
            out.metrics = run.metrics;
            out.curve = curve_rows("lm_loss", run.curve);
            out.files.push((format!("generations_seed{seed}.jsonl"), run.generations));
            out.files.push((format!("g_star_seed{seed}.csv"), run.g_star_csv));
        }
        Command::Universality => {
            let fixture = match cfg.universality.fixture.as_str() {
                "linear_negation" => UniversalityFixture::linear_negation(seed),
                _ => UniversalityFixture::symmetrized_cubic(seed),
            };
            let points = universality_curve(&fixture, &cfg.universality.budgets, seed)?;
            for p in &points {
                out.metrics.insert(format!("sup_error_{}", p.steps), p.sup_error);
                out.metrics.insert(format!("equivariance_error_{}", p.steps), p.equivariance_error);
                out.curve.push(CurveRow { series: "sup_error".into(), step: p.steps, value: p.sup_error });
                out.curve.push(CurveRow { series: "equivariance_error".into(), step: p.steps, value: p.equivariance_error });
            }
            if let Some(last) = points.last() {
                out.metrics.insert("sup_error".into(), last.sup_error);
            }
        }
        Command::Bench => {
            let t = run_bench(&cfg.bench, seed)?;
            for r in std::iter::once(&t.bare).chain(&t.wrappers) {
                out.metrics.insert(format!("{}_median_s", r.wrapper), r.median_s);
                out.metrics.insert(format!("{}_iqr_s", r.wrapper), r.iqr_s);
                out.metrics.insert(format!("{}_mean_s", r.wrapper), r.mean_s);
                out.metrics.insert(format!("{}_memory_bytes", r.wrapper), r.memory_bytes as f64);
            }
        }
    }
    Ok(out)
}

/// Runs `cmd` for every seed of `cfg`, fanning seeds over `parallel`
/// workers. Nothing is written to disk.
pub fn execute(cmd: Command, cfg: &RunConfig, parallel: usize, progress: &(dyn Fn(&str) + Sync)) -> Result<RunOutput, HarnessError> {
    if cfg.kind != cmd.kind() {
        return Err(HarnessError::Config(format!(
            "{} runs {} experiments, config has kind {}",
            cmd.name(),
            cmd.kind().name(),
            cfg.kind.name()
        )));
    }
    if cmd.needs_checkpoint() && cfg.checkpoint.is_none() {
        return Err(HarnessError::MissingCheckpoint);
    }
    let start = Instant::now();
    reset_peak_tape_bytes();
    let each = |&seed: &u64| {
        let t = Instant::now();
        let r = run_one(cmd, cfg, seed);
        if r.is_ok() {
            progress(&format!("{} seed {seed} done in {:.1}s", cmd.name(), t.elapsed().as_secs_f64()));
        }
        r
    };
    let outcomes: Vec<SeedOutcome> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        pool.install(|| cfg.seeds.par_iter().map(each).collect::<Result<_, _>>())?
    } else {
        cfg.seeds.iter().map(each).collect::<Result<_, _>>()?
    };
    let mut outcomes = outcomes;
    outcomes.sort_by_key(|o| o.seed);
    let summary = RunSummary {
        version: crate::VERSION.to_string(),
        command: cmd,
        kind: cfg.kind,
        config_hash: cfg.hash(),
        seeds: outcomes
            .iter()
            .map(|o| SeedMetrics {
                seed: o.seed,
                metrics: o.metrics.clone(),
            })
            .collect(),
        aggregate: aggregate(&outcomes),
        wall_clock_s: start.elapsed().as_secs_f64(),
        peak_memory_bytes: peak_tape_bytes(),
    };
    Ok(RunOutput { summary, outcomes })
}
