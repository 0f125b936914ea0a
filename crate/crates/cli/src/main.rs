use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use equikit::harness::{execute, Command, HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "equikit", version, about = "Train, wrap and evaluate symmetrized models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the shape CNN on upright images and score every wrapper.
    Pretrain(RunArgs),
    /// Score a CNN checkpoint under one wrapper.
    Eval(RunArgs),
    /// Finetune a CNN checkpoint through a wrapper.
    Finetune(RunArgs),
    /// Train a Q-network and evaluate raw, equitune and equizero policies.
    RlTrain(RunArgs),
    /// Evaluate the policies of a Q-network checkpoint.
    RlEval(RunArgs),
    /// Train a seq2seq model on the toy command split and decode it.
    ScanRun(RunArgs),
    /// Train a toy language model and compare decoding methods for fairness.
    Generate(RunArgs),
    /// Fit a λ-wrapped MLP to a symmetric target at increasing budgets.
    Universality(RunArgs),
    /// Time the wrappers against the bare backbone.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; defaults for the command's experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set vision.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "K=V")]
    set: Vec<String>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run up to N seeds at once.
    #[arg(long, value_name = "N", default_value_t = 1)]
    parallel_seeds: usize,
    #[arg(long)]
    quiet: bool,
}

fn split(cmd: Cmd) -> (Command, RunArgs) {
    match cmd {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Finetune(a) => (Command::Finetune, a),
        Cmd::RlTrain(a) => (Command::RlTrain, a),
        Cmd::RlEval(a) => (Command::RlEval, a),
        Cmd::ScanRun(a) => (Command::ScanRun, a),
        Cmd::Generate(a) => (Command::Generate, a),
        Cmd::Universality(a) => (Command::Universality, a),
        Cmd::Bench(a) => (Command::Bench, a),
    }
}

fn load(cmd: Command, args: &RunArgs) -> Result<RunConfig, HarnessError> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?,
        None => "{}".into(),
    };
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("config is not JSON: {e}")))?;
    if let Some(obj) = doc.as_object_mut() {
        obj.entry("kind").or_insert_with(|| cmd.kind().name().into());
    }
    let mut cfg = RunConfig::load(&doc.to_string(), &args.set)?;
    cfg.apply_seed_env()?;
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cmd: Command, args: RunArgs) -> Result<PathBuf, HarnessError> {
    let cfg = load(cmd, &args)?;
    if args.parallel_seeds == 0 {
        return Err(HarnessError::Config("--parallel-seeds must be at least 1".into()));
    }
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
    let quiet = args.quiet;
    let progress = move |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    let output = execute(cmd, &cfg, args.parallel_seeds, &progress)?;
    output.write(&dir)?;
    if !quiet {
        for (k, s) in &output.summary.aggregate {
            eprintln!("{k:>32}  {:.4} ± {:.4}", s.mean, s.std);
        }
    }
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = split(cli.command);
    let quiet = args.quiet;
    match run(cmd, args) {
        Ok(dir) => {
            if !quiet {
                eprintln!("wrote {}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
