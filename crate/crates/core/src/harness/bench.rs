use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{gen_shapes, ShapeSplit, NUM_CLASSES, SIDE};
use crate::diff::{ParamMode, Tape, Tensor};
use crate::group::{ActionKind, GroupAction};
use crate::models::{Backbone, ShapeCnn, CNN_FEATURE_DIM};
use crate::rng::substream;
use crate::wrap::{self, make_lambda_net, EquiConfig, Lambda, Modes, ProxyLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Group order: 4 rotates the image by quarter turns, 1 is the trivial group.
    pub order: usize,
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            order: 4,
            batch: 16,
            reps: 100,
            warmup: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub wrapper: String,
    pub median_s: f64,
    pub iqr_s: f64,
    pub mean_s: f64,
    /// Tape value storage for one batch.
    pub memory_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub bare: BenchRow,
    pub wrappers: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        if name == "bare" {
            return Some(&self.bare);
        }
        self.wrappers.iter().find(|r| r.wrapper == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("wrapper,median_s,iqr_s,mean_s,memory_bytes,slowdown\n");
        for r in &self.wrappers {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{},{:.4}\n",
                r.wrapper,
                r.median_s,
                r.iqr_s,
                r.mean_s,
                r.memory_bytes,
                r.median_s / self.bare.median_s
            ));
        }
        s
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(name: &str, mut times: Vec<f64>, memory_bytes: usize) -> BenchRow {
    times.sort_by(f64::total_cmp);
    BenchRow {
        wrapper: name.into(),
        median_s: quantile(&times, 0.5),
        iqr_s: quantile(&times, 0.75) - quantile(&times, 0.25),
        mean_s: times.iter().sum::<f64>() / times.len() as f64,
        memory_bytes,
    }
}

/// Median and IQR latency of the bare backbone and of each wrapper on one
/// fixed batch. Wrappers are `(name, config)` pairs.
pub fn bench_wrappers(
    backbone: &dyn Backbone,
    wrappers: &[(&str, EquiConfig)],
    batch: &Tensor,
    reps: usize,
    warmup: usize,
) -> Result<BenchTable, HarnessError> {
    if reps < 10 {
        return Err(HarnessError::Config("bench needs at least 10 reps".into()));
    }
    let run = |i: usize| -> Result<usize, HarnessError> {
        let tape = Tape::new();
        match i {
            0 => {
                backbone.forward_batch_with(backbone.params(), &tape, tape.constant(batch.clone()), ParamMode::Frozen)?;
            }
            _ => {
                wrap::forward_batch(backbone, &wrappers[i - 1].1, &tape, batch, Modes::FROZEN)?;
            }
        }
        Ok(tape.allocated_bytes())
    };
    let n = wrappers.len() + 1;
    let mut bytes = vec![0; n];
    for _ in 0..warmup {
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = run(i)?;
        }
    }
    // round-robin so slow drift in machine load hits every candidate alike
    let mut times = vec![Vec::with_capacity(reps); n];
    for r in 0..reps {
        for k in 0..n {
            let i = (r + k) % n;
            let t = Instant::now();
            run(i)?;
            times[i].push(t.elapsed().as_secs_f64());
        }
    }
    let mut times = times.into_iter();
    let bare = summarize("bare", times.next().expect("bare timings"), bytes[0]);
    let rows = wrappers
        .iter()
        .zip(times)
        .zip(&bytes[1..])
        .map(|(((name, _), t), &b)| summarize(name, t, b))
        .collect();
    Ok(BenchTable { bare, wrappers: rows })
}

/// The standard table: shape CNN, rot90 group of `cfg.order`, equitune,
/// equizero (neg-max-prob) and λ-equitune with an untrained λ-network.
pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<BenchTable, HarnessError> {
    let kind = if cfg.order == 1 { ActionKind::Trivial } else { ActionKind::Rot90Image };
    let input = GroupAction::cyclic(cfg.order, kind)?;
    let output = GroupAction::cyclic(cfg.order, ActionKind::Trivial)?;
    let model = ShapeCnn::new(SIDE, NUM_CLASSES, &mut substream(seed, "bench.init"));
    let net = make_lambda_net(CNN_FEATURE_DIM, &mut substream(seed, "bench.lambda"));
    let wrappers = [
        ("equitune", EquiConfig::equitune(input.clone(), output.clone())),
        ("equizero", EquiConfig::equizero(input.clone(), output.clone(), ProxyLoss::NegMaxProb)),
        ("lambda", EquiConfig::lambda(input, output, Lambda::Net(net))),
    ];
    let data = gen_shapes(seed, cfg.batch, ShapeSplit::TestUpright);
    bench_wrappers(&model, &wrappers, &data.batch(0..cfg.batch), cfg.reps, cfg.warmup)
}
