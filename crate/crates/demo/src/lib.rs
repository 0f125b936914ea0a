//! Browser demo: a small shape classifier under each wrapper, an
//! equivariance probe on random backbones, and fair decoding with a toy
//! language model. Every export returns a JSON string.

use equikit::data::{gen_shapes, render_glyph, ShapeSplit, GLYPH_NAMES, NUM_CLASSES, SIDE};
use equikit::diff::{softmax, Tape, Tensor};
use equikit::group::{ActionKind, GroupAction, Point};
use equikit::harness::vision::{c4_image, c4_invariant, fit_lambda, pretrain_cnn, VisionConfig};
use equikit::models::{Activation, Backbone, Mlp, ShapeCnn, SoftmaxHead};
use equikit::rng::substream;
use equikit::seqlm::{
    equitune_generate, equizero_generate, greedy_generate, toy_corpus, toy_word_sets, train_lm, word_swap_action, GenOptions,
    LmTrainOpts, ToyCorpus, ToyLM, ToyLmConfig, WordSets,
};
use equikit::wrap::{self, EquiConfig, Modes, ProxyLoss, TrainOpts};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string())
}

fn fail(e: impl std::fmt::Display) -> String {
    json!({ "error": e.to_string() }).to_string()
}

#[wasm_bindgen]
pub fn glyph_names() -> String {
    to_js(&GLYPH_NAMES)
}

/// Shape CNN trained on upright glyphs, with a fitted λ-network.
#[wasm_bindgen]
pub struct ShapeLab {
    model: ShapeCnn,
    lambda: EquiConfig,
    seed: u64,
}

#[wasm_bindgen]
impl ShapeLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, steps: u32) -> Result<ShapeLab, JsError> {
        let seed = seed as u64;
        let cfg = VisionConfig {
            train_size: 800,
            steps: steps as usize,
            lambda_examples: 128,
            ..VisionConfig::default()
        };
        let (model, _) = pretrain_cnn(&cfg, seed).map_err(|e| JsError::new(&e.to_string()))?;
        let phase = TrainOpts { steps: 300, ..TrainOpts::lambda_phase() };
        let lambda = fit_lambda(&model, &cfg, &phase, seed).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(ShapeLab { model, lambda, seed })
    }

    /// Renders glyph `class` turned by `turns` quarter turns and reports
    /// the class probabilities of the bare model and of every wrapper.
    pub fn classify(&self, class: u32, turns: u32, variant: u32) -> String {
        classify(self, class as usize, turns as usize, variant as u64).unwrap_or_else(fail)
    }

    /// Accuracy on upright and rotated test glyphs for each wrapper.
    pub fn scoreboard(&self, n: u32) -> String {
        scoreboard(self, n.max(8) as usize).unwrap_or_else(fail)
    }
}

fn glyph(class: usize, turns: usize, variant: u64) -> Result<Tensor, String> {
    let mut rng = substream(variant, "demo.glyph");
    let img = render_glyph(class % NUM_CLASSES, 2, 2, 0.15, &mut rng);
    let t = Tensor::new(vec![1, SIDE, SIDE], img).map_err(|e| e.to_string())?;
    c4_image().act_tensor(turns % 4, &t).map_err(|e| e.to_string())
}

fn wrappers(lab: &ShapeLab) -> Vec<(&'static str, EquiConfig)> {
    vec![
        ("equitune", EquiConfig::equitune(c4_image(), c4_invariant())),
        ("equizero", EquiConfig::equizero(c4_image(), c4_invariant(), ProxyLoss::NegMaxProb)),
        ("lambda", lab.lambda.clone()),
    ]
}

fn classify(lab: &ShapeLab, class: usize, turns: usize, variant: u64) -> Result<String, String> {
    let x = glyph(class, turns, variant)?;
    let probs = SoftmaxHead::new(lab.model.clone());
    let raw = softmax(lab.model.predict(&Point::Real(x.clone())).map_err(|e| e.to_string())?.data());
    let mut rows = vec![json!({ "wrapper": "bare", "probs": raw })];
    for (name, c) in wrappers(lab) {
        let tape = Tape::new();
        let b: &dyn Backbone = if name == "equitune" { &probs } else { &lab.model };
        let out = wrap::forward(b, &c, &tape, &Point::Real(x.clone()), Modes::FROZEN).map_err(|e| e.to_string())?;
        let v = out.output.value().into_data();
        let p = if name == "equitune" { v } else { softmax(&v) };
        rows.push(json!({
            "wrapper": name,
            "probs": p,
            "g_star": out.g_star.first(),
            "weights": out.weights.first(),
        }));
    }
    Ok(json!({ "image": x.data(), "side": SIDE, "class": GLYPH_NAMES[class % NUM_CLASSES], "rows": rows }).to_string())
}

fn scoreboard(lab: &ShapeLab, n: usize) -> Result<String, String> {
    use equikit::harness::vision::accuracy;
    let up = gen_shapes(lab.seed, n, ShapeSplit::TestUpright);
    let rot = gen_shapes(lab.seed, n, ShapeSplit::TestRot90);
    let probs = SoftmaxHead::new(lab.model.clone());
    let e = |r: Result<f64, equikit::harness::HarnessError>| r.map_err(|e| e.to_string());
    let mut rows = vec![json!({
        "wrapper": "bare",
        "upright": e(accuracy(&lab.model, None, &up))?,
        "rot90": e(accuracy(&lab.model, None, &rot))?,
    })];
    for (name, c) in wrappers(lab) {
        let b: &dyn Backbone = if name == "equitune" { &probs } else { &lab.model };
        rows.push(json!({
            "wrapper": name,
            "upright": e(accuracy(b, Some(&c), &up))?,
            "rot90": e(accuracy(b, Some(&c), &rot))?,
        }));
    }
    Ok(to_js(&rows))
}

/// `‖f(gx) − g·f(x)‖∞` for a random 4×4 → 4×4 MLP, bare and wrapped, for
/// every group element. `action` is `rot90` or `hflip`; `wrapper` is
/// `equitune`, `equizero` or `lambda`.
#[wasm_bindgen]
pub fn equivariance_probe(seed: u32, action: &str, wrapper: &str) -> String {
    probe(seed as u64, action, wrapper).unwrap_or_else(fail)
}

fn probe(seed: u64, action: &str, wrapper: &str) -> Result<String, String> {
    let (n, kind) = match action {
        "rot90" => (4, ActionKind::Rot90Image),
        "hflip" => (2, ActionKind::HflipImage),
        other => return Err(format!("unknown action {other:?}")),
    };
    let act = GroupAction::cyclic(n, kind).map_err(|e| e.to_string())?;
    let mut rng = substream(seed, "demo.probe");
    let m = Mlp::random(&[16, 24, 16], Activation::Tanh, &mut rng).with_out_shape(&[4, 4]);
    let c = match wrapper {
        "equitune" => EquiConfig::equitune(act.clone(), act.clone()),
        "equizero" => EquiConfig::equizero(act.clone(), act.clone(), ProxyLoss::Entropy),
        "lambda" => EquiConfig::lambda(act.clone(), act.clone(), equikit::wrap::Lambda::fixed(|_, z| 1.0 + z[0].tanh().powi(2))),
        other => return Err(format!("unknown wrapper {other:?}")),
    };
    let x = Tensor::new(vec![4, 4], (0..16).map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.5)).sin()).collect()).map_err(|e| e.to_string())?;
    let gap = |f: &dyn Fn(&Tensor) -> Result<Tensor, String>, g: usize| -> Result<f64, String> {
        let lhs = f(&act.act_tensor(g, &x).map_err(|e| e.to_string())?)?;
        let rhs = act.act_tensor(g, &f(&x)?).map_err(|e| e.to_string())?;
        Ok(lhs.data().iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    };
    let bare = |t: &Tensor| m.predict(&Point::Real(t.clone())).map_err(|e| e.to_string());
    let wrapped = |t: &Tensor| wrap::predict(&m, &c, &Point::Real(t.clone())).map_err(|e| e.to_string());
    let mut rows = Vec::new();
    for g in 0..n {
        rows.push(json!({ "g": g, "bare": gap(&bare, g)?, "wrapped": gap(&wrapped, g)? }));
    }
    Ok(to_js(&rows))
}

/// Toy language model trained on a biased corpus, decoded with and without
/// the gender-swap group.
#[wasm_bindgen]
pub struct FairLab {
    corpus: ToyCorpus,
    lm: ToyLM,
    strict: WordSets,
    relaxed: WordSets,
}

#[wasm_bindgen]
impl FairLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, steps: u32) -> Result<FairLab, JsError> {
        build_fair(seed as u64, steps as usize).map_err(|e| JsError::new(&e))
    }

    pub fn vocabulary(&self) -> String {
        to_js(&self.corpus.vocab.words())
    }

    /// Completes `prompt` and its swapped twin with `method` (`raw`,
    /// `equitune`, `relaxed` or `equizero`).
    pub fn generate(&self, prompt: &str, method: &str, tokens: u32) -> String {
        generate(self, prompt, method, tokens as usize).unwrap_or_else(fail)
    }
}

fn build_fair(seed: u64, steps: usize) -> Result<FairLab, String> {
    let corpus = toy_corpus(1500, 0.85, seed);
    let doc = toy_word_sets();
    let strict = WordSets::resolve(&doc, &corpus.vocab, false).map_err(|e| e.to_string())?;
    let relaxed = WordSets::resolve(&doc, &corpus.vocab, true).map_err(|e| e.to_string())?;
    let cfg = ToyLmConfig {
        vocab: corpus.vocab.len(),
        embed: 16,
        hidden: 32,
        max_context: 24,
    };
    let mut lm = ToyLM::new(cfg, &mut substream(seed, "demo.lm"));
    train_lm(&mut lm, &corpus.sentences, &LmTrainOpts { steps, ..LmTrainOpts::default() }, seed).map_err(|e| e.to_string())?;
    Ok(FairLab { corpus, lm, strict, relaxed })
}

fn generate(lab: &FairLab, prompt: &str, method: &str, tokens: usize) -> Result<String, String> {
    let action = word_swap_action(&lab.strict).map_err(|e| e.to_string())?;
    let ctx = lab.corpus.vocab.encode(prompt).map_err(|e| e.to_string())?;
    if ctx.len() + tokens > lab.lm.config().max_context {
        return Err("prompt plus completion is too long".into());
    }
    let opts = GenOptions { total_tokens: tokens, beam: 3, ..GenOptions::default() };
    let mut rows = Vec::new();
    for g in 0..2 {
        let c = action.act_tokens(g, &ctx).map_err(|e| e.to_string())?;
        let out = match method {
            "raw" => greedy_generate(&lab.lm, &c, &opts),
            "equitune" => equitune_generate(&lab.lm, &action, &c, &opts),
            "relaxed" => equitune_generate(&lab.lm, &action, &c, &GenOptions { general: lab.relaxed.general.clone(), ..opts.clone() }),
            "equizero" => equizero_generate(&lab.lm, &action, &lab.corpus.scorer, &c, &opts),
            other => return Err(format!("unknown method {other:?}")),
        }
        .map_err(|e| e.to_string())?;
        let full: Vec<usize> = c.iter().chain(&out.tokens).copied().collect();
        rows.push(json!({
            "prompt": lab.corpus.vocab.decode(&c),
            "completion": lab.corpus.vocab.decode(&out.tokens),
            "score": equikit::seqlm::SentenceScorer::score(&lab.corpus.scorer, &full),
            "g_star": out.g_star_trace(),
        }));
    }
    Ok(to_js(&rows))
}
