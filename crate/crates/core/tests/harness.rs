use std::fs;

use equikit::harness::{execute, Command, HarnessError, RunConfig, RunOutput, WrapperMode};
use equikit::harness::bench::{run_bench, BenchConfig};
use equikit::harness::finetune::{finetune, load_cnn, FinetuneConfig};
use equikit::harness::vision::{pretrain_cnn, VisionConfig};
use equikit::models::Backbone;
use equikit::wrap::{ProxyKind, TrainOpts};

fn quiet(_: &str) {}

fn small(kind: &str, extra: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = vec![
        "vision.train_size=96".into(),
        "vision.test_size=40".into(),
        "vision.steps=20".into(),
        "vision.lambda_examples=32".into(),
        "lambda_phase.steps=5".into(),
        "scan.steps=30".into(),
        "scan.batch=4".into(),
        "rl.dqn.steps=300".into(),
        "rl.dqn.warmup=50".into(),
        "rl.dqn.buffer=200".into(),
        "rl.dqn.batch=8".into(),
        "rl.dqn.hidden=16".into(),
        "rl.side=5".into(),
        "fairness.corpus_size=100".into(),
        "fairness.train.steps=20".into(),
        "fairness.generation.total_tokens=4".into(),
        "fairness.generation.beam=2".into(),
        "universality.budgets=[5,10,20]".into(),
        "finetune.steps=3".into(),
        "finetune.examples=32".into(),
        "finetune.batch=8".into(),
        "bench.reps=10".into(),
        "bench.batch=2".into(),
        "bench.warmup=1".into(),
    ];
    sets.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(&format!(r#"{{"kind":"{kind}"}}"#), &sets).unwrap()
}

fn run(cmd: Command, cfg: &RunConfig) -> RunOutput {
    execute(cmd, cfg, 1, &quiet).unwrap()
}

#[test]
fn unknown_keys_are_rejected() {
    for doc in [
        r#"{"kind":"vision","colour":"red"}"#,
        r#"{"kind":"vision","vision":{"stepz":3}}"#,
        r#"{"kind":"telepathy"}"#,
        r#"{"seeds":[0]}"#,
        r#"[1,2]"#,
    ] {
        assert!(matches!(RunConfig::load(doc, &[]), Err(HarnessError::Config(_))), "{doc}");
    }
    assert!(RunConfig::load(r#"{"kind":"vision"}"#, &["vision.nope=1".into()]).is_err());
    assert!(RunConfig::load(r#"{"kind":"vision"}"#, &["noequals".into()]).is_err());
    assert!(RunConfig::load(r#"{"kind":"vision","seeds":[1,1]}"#, &[]).is_err());
    assert!(RunConfig::load(r#"{"kind":"bench","bench":{"reps":3}}"#, &[]).is_err());
}

#[test]
fn overrides_reach_nested_fields_and_keep_sibling_defaults() {
    let c = RunConfig::load(r#"{"kind":"rl","rl":{"dqn":{"gamma":0.9}}}"#, &["rl.dqn.lr=0.5".into(), "wrapper=equizero".into()]).unwrap();
    let d = RunConfig::new(equikit::harness::ExperimentKind::Rl);
    assert_eq!(c.rl.dqn.gamma, 0.9);
    assert_eq!(c.rl.dqn.lr, 0.5);
    assert_eq!(c.rl.dqn.steps, d.rl.dqn.steps);
    assert_eq!(c.rl.dqn.hidden, d.rl.dqn.hidden);
    assert_eq!(c.wrapper, WrapperMode::Equizero);
    let l = RunConfig::load(r#"{"kind":"vision"}"#, &["lambda_phase.steps=7".into()]).unwrap();
    assert_eq!(l.lambda_phase, TrainOpts { steps: 7, ..TrainOpts::lambda_phase() });
}

#[test]
fn hash_ignores_the_output_directory_only() {
    let a = RunConfig::load(r#"{"kind":"scan","out":"x"}"#, &[]).unwrap();
    let b = RunConfig::load(r#"{"kind":"scan","out":"y"}"#, &[]).unwrap();
    let c = RunConfig::load(r#"{"kind":"scan","seeds":[3]}"#, &[]).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn seed_env_replaces_the_seed_list() {
    let mut c = RunConfig::load(r#"{"kind":"scan","seeds":[1,2]}"#, &[]).unwrap();
    std::env::set_var(equikit::harness::SEED_ENV, "42");
    let r = c.apply_seed_env();
    std::env::set_var(equikit::harness::SEED_ENV, "x");
    let bad = c.clone().apply_seed_env();
    std::env::remove_var(equikit::harness::SEED_ENV);
    r.unwrap();
    assert_eq!(c.seeds, vec![42]);
    assert!(bad.is_err());
}

#[test]
fn commands_check_kind_and_checkpoint() {
    let v = small("vision", &[]);
    assert!(matches!(execute(Command::ScanRun, &v, 1, &quiet), Err(HarnessError::Config(_))));
    assert!(matches!(execute(Command::Eval, &v, 1, &quiet), Err(HarnessError::MissingCheckpoint)));
    assert!(matches!(execute(Command::Finetune, &v, 1, &quiet), Err(HarnessError::MissingCheckpoint)));
    let r = small("rl", &[]);
    assert!(matches!(execute(Command::RlEval, &r, 1, &quiet), Err(HarnessError::MissingCheckpoint)));
    let gone = small("vision", &["checkpoint=\"/nonexistent/ckpt.json\""]);
    assert!(matches!(execute(Command::Eval, &gone, 1, &quiet), Err(HarnessError::Io(_))));
}

#[test]
fn identical_runs_give_identical_metrics() {
    let c = small("scan", &["seeds=[0,1]"]);
    let a = run(Command::ScanRun, &c);
    let b = run(Command::ScanRun, &c);
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.curve_csv(), b.curve_csv());
    assert_eq!(a.summary.config_hash, b.summary.config_hash);
    let p = execute(Command::ScanRun, &c, 2, &quiet).unwrap();
    assert_eq!(a.metrics_csv(), p.metrics_csv());
    let csv = a.metrics_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("seed,"));
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
}

#[test]
fn pretrain_eval_and_finetune_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let pre = run(Command::Pretrain, &small("vision", &[]));
    pre.write(dir.path()).unwrap();
    for f in ["metrics.csv", "summary.json", "curve.csv", "checkpoint_seed0.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    for key in ["version", "config_hash", "seeds", "aggregate", "wall_clock_s", "peak_memory_bytes"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    assert!(summary["peak_memory_bytes"].as_u64().unwrap() > 0);
    let ckpt = dir.path().join("checkpoint_seed{seed}.json");
    let set = format!("checkpoint={:?}", ckpt.to_string_lossy());
    for w in ["none", "equitune", "equizero", "lambda"] {
        let out = run(Command::Eval, &small("vision", &[&set, &format!("wrapper={w}")]));
        let m = &out.summary.seeds[0].metrics;
        assert!(m.contains_key("accuracy_upright") && m.contains_key("accuracy_rot90"), "{w}");
        if w == "none" {
            assert_eq!(m["accuracy_rot90"], m["raw_accuracy_rot90"]);
        }
    }
    let ft = run(Command::Finetune, &small("vision", &[&set, "wrapper=lambda"]));
    ft.write(dir.path()).unwrap();
    assert!(dir.path().join("finetuned_seed0.json").exists());
    assert!(dir.path().join("lambda_seed0.json").exists());
    load_cnn(&fs::read_to_string(dir.path().join("finetuned_seed0.json")).unwrap()).unwrap();
}

#[test]
fn every_command_runs_at_toy_scale() {
    let dir = tempfile::tempdir().unwrap();
    let rl = run(Command::RlTrain, &small("rl", &[]));
    for k in ["raw_return", "equitune_return", "equizero_return"] {
        assert!(rl.summary.aggregate.contains_key(k));
    }
    rl.write(dir.path()).unwrap();
    let set = format!("checkpoint={:?}", dir.path().join("qnet_seed{seed}.json").to_string_lossy());
    let ev = run(Command::RlEval, &small("rl", &[&set]));
    assert_eq!(ev.summary.seeds[0].metrics, rl.summary.seeds[0].metrics);

    let g = run(Command::Generate, &small("fairness", &[]));
    let files = &g.outcomes[0].files;
    let lines = &files.iter().find(|f| f.0.ends_with(".jsonl")).unwrap().1;
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["g_star", "round", "scores", "tokens"]);
    }
    assert!(files.iter().any(|f| f.0.starts_with("g_star") && f.1.starts_with("prompt,demographic,round,g_star")));
    assert_eq!(g.summary.seeds[0].metrics["equizero_disparity"], 0.0);
    assert_eq!(g.summary.seeds[0].metrics["equitune_disparity"], 0.0);

    let u = run(Command::Universality, &small("universality", &[]));
    assert!(u.summary.seeds[0].metrics["equivariance_error_20"] <= 1e-9);

    let b = run(Command::Bench, &small("bench", &[]));
    let csv = b.metrics_csv();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (r, w) in rows.iter().zip(["equitune", "equizero", "lambda"]) {
        assert!(r.starts_with(&format!("0,{w},")));
    }
}

fn trained_cnn() -> equikit::models::ShapeCnn {
    let cfg = VisionConfig {
        train_size: 64,
        steps: 10,
        ..VisionConfig::default()
    };
    pretrain_cnn(&cfg, 3).unwrap().0
}

#[test]
fn zero_step_finetune_returns_the_input() {
    let m = trained_cnn();
    let cfg = FinetuneConfig {
        steps: 0,
        examples: 16,
        ..FinetuneConfig::default()
    };
    for mode in [WrapperMode::Equitune, WrapperMode::Equizero, WrapperMode::Lambda] {
        let lam = TrainOpts { steps: 4, ..TrainOpts::lambda_phase() };
        let run = finetune(&m, mode, ProxyKind::NegMaxProb, &cfg, &lam, 0).unwrap();
        // for λ this also covers phase 1 leaving the backbone untouched
        assert_eq!(run.model.params(), m.params(), "{mode:?}");
        assert_eq!(run.model.params().to_checkpoint_json().unwrap(), m.params().to_checkpoint_json().unwrap());
    }
}

#[test]
fn straight_through_and_equitune_take_the_same_first_step() {
    let m = trained_cnn();
    let cfg = FinetuneConfig {
        steps: 1,
        examples: 16,
        batch: 8,
        lr: 1e-2,
        ..FinetuneConfig::default()
    };
    let lam = TrainOpts::lambda_phase();
    let a = finetune(&m, WrapperMode::Equitune, ProxyKind::NegMaxProb, &cfg, &lam, 5).unwrap();
    let b = finetune(&m, WrapperMode::Equizero, ProxyKind::NegMaxProb, &cfg, &lam, 5).unwrap();
    let (pa, pb, p0) = (a.model.params().flat_values(), b.model.params().flat_values(), m.params().flat_values());
    let moved = pa.iter().zip(&p0).filter(|(x, y)| x != y).count();
    assert!(moved > 0);
    let d = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(d <= 1e-10, "{d}");
    // the reported losses differ: equizero's is measured on its own output
    assert_ne!(a.curve, b.curve);
}

#[test]
fn trivial_group_wrappers_cost_about_a_bare_forward() {
    let t = run_bench(&BenchConfig { order: 1, reps: 60, batch: 8, warmup: 3 }, 0).unwrap();
    for r in &t.wrappers {
        let ratio = r.median_s / t.bare.median_s;
        assert!(ratio <= 1.05, "{}: {ratio}", r.wrapper);
    }
    let c4 = run_bench(&BenchConfig { order: 4, reps: 30, batch: 8, warmup: 3 }, 0).unwrap();
    for r in &c4.wrappers {
        assert!(r.median_s >= 3.0 * c4.bare.median_s, "{}", r.wrapper);
        assert!(r.memory_bytes > 3 * c4.bare.memory_bytes);
    }
}
