use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::group::GroupAction;
use crate::rng::substream;
use crate::seqlm::{
    equitune_generate, equizero_generate, fairness_eval_normalized, greedy_generate, toy_corpus, toy_word_sets, train_lm,
    word_swap_action, GenOptions, Generation, LmTrainOpts, SentenceScorer, ToyLM, ToyLmConfig, WordSets, WordSetsDoc,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FairnessConfig {
    pub corpus_size: usize,
    /// Probability that the first demographic is described positively.
    pub bias: f64,
    pub embed: usize,
    pub hidden: usize,
    pub train: LmTrainOpts,
    pub generation: GenOptions,
    /// Prompts written for the first demographic; the others are their images.
    pub prompts: Vec<String>,
    pub word_sets: Option<WordSetsDoc>,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self {
            corpus_size: 2000,
            bias: 0.8,
            embed: 16,
            hidden: 32,
            train: LmTrainOpts::default(),
            generation: GenOptions::default(),
            prompts: ["the man was", "he was very", "the boy is known for being", "he worked as a", "his friends"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            word_sets: None,
        }
    }
}

pub const METHODS: [&str; 4] = ["raw", "equitune", "relaxed", "equizero"];

pub struct FairnessRun {
    pub metrics: BTreeMap<String, f64>,
    pub curve: Vec<f64>,
    /// Round logs of every equizero generation, one JSON object per line.
    pub generations: String,
    /// `prompt,demographic,round,g_star,score_g0,...`
    pub g_star_csv: String,
}

fn generate(
    method: &str,
    lm: &ToyLM,
    action: &GroupAction,
    relaxed: &WordSets,
    scorer: &dyn SentenceScorer,
    ctx: &[usize],
    opts: &GenOptions,
) -> Result<Generation, HarnessError> {
    Ok(match method {
        "raw" => greedy_generate(lm, ctx, opts)?,
        "equitune" => equitune_generate(lm, action, ctx, &GenOptions { general: Vec::new(), ..opts.clone() })?,
        "relaxed" => equitune_generate(lm, action, ctx, &GenOptions { general: relaxed.general.clone(), ..opts.clone() })?,
        _ => equizero_generate(lm, action, scorer, ctx, opts)?,
    })
}

/// Trains a toy LM on a biased corpus and generates from every prompt and
/// each of its demographic images with every decoding method.
pub fn run_seed(cfg: &FairnessConfig, seed: u64) -> Result<FairnessRun, HarnessError> {
    let corpus = toy_corpus(cfg.corpus_size, cfg.bias, seed);
    let doc = cfg.word_sets.clone().unwrap_or_else(toy_word_sets);
    let strict = WordSets::resolve(&doc, &corpus.vocab, false)?;
    let relaxed = WordSets::resolve(&doc, &corpus.vocab, true)?;
    let action = word_swap_action(&strict)?;
    let prompts = cfg.prompts.iter().map(|p| corpus.vocab.encode(p)).collect::<Result<Vec<_>, _>>()?;
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    let mut lm = ToyLM::new(
        ToyLmConfig {
            vocab: corpus.vocab.len(),
            embed: cfg.embed,
            hidden: cfg.hidden,
            max_context: longest + cfg.generation.total_tokens,
        },
        &mut substream(seed, "fairness.init"),
    );
    let curve = train_lm(&mut lm, &corpus.sentences, &cfg.train, seed)?;
    let opts = GenOptions { seed, ..cfg.generation.clone() };
    let group = action.group();
    let mut metrics = BTreeMap::new();
    let mut generations = String::new();
    let mut g_star_csv = String::from("prompt,demographic,round,g_star");
    for g in 0..group.order() {
        let _ = write!(g_star_csv, ",score_g{g}");
    }
    g_star_csv.push('\n');
    for method in METHODS {
        let mut per_demographic = vec![Vec::new(); group.order()];
        for (p, prompt) in prompts.iter().enumerate() {
            for (k, seqs) in per_demographic.iter_mut().enumerate() {
                let ctx = action.act_tokens(k, prompt)?;
                let out = generate(method, &lm, &action, &relaxed, &corpus.scorer, &ctx, &opts)?;
                if method == "equizero" {
                    generations.push_str(&out.to_json_lines());
                    for r in &out.rounds {
                        let _ = write!(g_star_csv, "{p},{k},{},{}", r.round, r.g_star);
                        for s in &r.scores {
                            let _ = write!(g_star_csv, ",{s}");
                        }
                        g_star_csv.push('\n');
                    }
                }
                seqs.push(ctx.iter().chain(&out.tokens).copied().collect::<Vec<_>>());
            }
        }
        let report = fairness_eval_normalized(&per_demographic, &action, &corpus.scorer)?;
        let lo = report.means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = report.means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        metrics.insert(format!("{method}_disparity"), report.disparity);
        metrics.insert(format!("{method}_score_gap"), hi - lo);
        metrics.insert(format!("{method}_mean_score"), report.means.iter().sum::<f64>() / report.means.len() as f64);
    }
    metrics.insert("train_loss".into(), curve.last().copied().unwrap_or(f64::NAN));
    Ok(FairnessRun {
        metrics,
        curve,
        generations,
        g_star_csv,
    })
}
