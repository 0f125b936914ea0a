use super::*;
use crate::group::Point;
use crate::models::Backbone;
use crate::rng::substream;
use crate::diff::{grad_check, ParamMode};
use proptest::prelude::*;

fn tiny_vocab() -> Vocab {
    Vocab::new(&["the", "man", "woman", "is", "doctor", "he", "she", "good", "bad", "."]).unwrap()
}

fn tiny_sets(relaxed: bool) -> WordSets {
    let doc = WordSetsDoc {
        equality: vec![vec!["man".into(), "woman".into()], vec!["he".into(), "she".into()]],
        neutral: vec!["doctor".into(), "good".into(), "bad".into()],
        d: 2,
    };
    WordSets::resolve(&doc, &tiny_vocab(), relaxed).unwrap()
}

fn random_lm(vocab: usize, seed: u64) -> ToyLM {
    ToyLM::new(
        ToyLmConfig {
            vocab,
            embed: 6,
            hidden: 8,
            max_context: 40,
        },
        &mut substream(seed, "lm"),
    )
}

fn tiny_scorer(v: &Vocab) -> LexiconScorer {
    LexiconScorer::new([(v.id("good").unwrap(), 0.7), (v.id("bad").unwrap(), -0.9), (v.id("doctor").unwrap(), 0.13)])
}

#[test]
fn swap_action_maps_words_and_has_order_d() {
    let v = tiny_vocab();
    let a = word_swap_action(&tiny_sets(false)).unwrap();
    let x = v.encode("the man is").unwrap();
    assert_eq!(v.decode(&a.act_tokens(1, &x).unwrap()), "the woman is");
    let y = v.encode("he is a doctor").unwrap_or_else(|_| v.encode("he is doctor").unwrap());
    let twice = a.act_tokens(1, &a.act_tokens(1, &y).unwrap()).unwrap();
    assert_eq!(twice, y);
    let doctor = v.id("doctor").unwrap();
    assert!((0..2).all(|g| a.map_token(g, doctor).unwrap() == doctor));
}

#[test]
fn word_sets_json_round_trips_and_rejects_overlaps() {
    let doc = WordSetsDoc::from_json(r#"{"equality":[["man","woman"],["he","she"]],"neutral":["doctor"],"d":2}"#).unwrap();
    assert_eq!(WordSetsDoc::from_json(&doc.to_json()).unwrap(), doc);
    let strict = WordSets::resolve(&doc, &tiny_vocab(), false).unwrap();
    assert!(strict.general.is_empty());
    assert_eq!(strict.neutral.len(), 6);
    let relaxed = WordSets::resolve(&doc, &tiny_vocab(), true).unwrap();
    assert_eq!(relaxed.neutral, vec![4]);
    assert_eq!(relaxed.general.len(), 5);
    let bad = WordSetsDoc::from_json(r#"{"equality":[["man","woman"],["man","she"]],"d":2}"#).unwrap();
    assert!(matches!(WordSets::resolve(&bad, &tiny_vocab(), false), Err(SeqError::WordSets(_))));
    let short = WordSetsDoc::from_json(r#"{"equality":[["man"]],"d":2}"#).unwrap();
    assert!(WordSets::resolve(&short, &tiny_vocab(), false).is_err());
    assert!(WordSetsDoc::from_json(r#"{"equality":[],"d":2,"extra":1}"#).is_err());
}

#[test]
fn trivial_group_equizero_is_greedy() {
    let lm = random_lm(10, 1);
    let trivial = word_swap_action(&WordSets {
        equality: vec![],
        neutral: (0..10).collect(),
        general: vec![],
        d: 1,
    })
    .unwrap();
    let opts = GenOptions {
        beam: 3,
        total_tokens: 7,
        ..GenOptions::default()
    };
    let ctx = [0, 1, 3];
    let greedy = greedy_generate(&lm, &ctx, &opts).unwrap();
    let zero = equizero_generate(&lm, &trivial, &tiny_scorer(&tiny_vocab()), &ctx, &opts).unwrap();
    let tune = equitune_generate(&lm, &trivial, &ctx, &opts).unwrap();
    assert_eq!(zero.tokens, greedy.tokens);
    assert_eq!(tune.tokens, greedy.tokens);
    assert_eq!(zero.g_star_trace(), vec![0, 0, 0]);
    assert_eq!(zero.rounds.iter().map(|r| r.tokens.len()).collect::<Vec<_>>(), vec![3, 3, 1]);
}

#[test]
fn single_round_when_beam_covers_everything() {
    let lm = random_lm(10, 2);
    let a = word_swap_action(&tiny_sets(false)).unwrap();
    let opts = GenOptions {
        beam: 6,
        total_tokens: 6,
        ..GenOptions::default()
    };
    let g = equizero_generate(&lm, &a, &tiny_scorer(&tiny_vocab()), &[0, 1], &opts).unwrap();
    assert_eq!(g.rounds.len(), 1);
    assert_eq!(g.tokens.len(), 6);
}

#[test]
fn hand_built_lm_picks_the_positive_branch() {
    // 0 a, 1 b (swapped pair), 2 good, 3 bad, 4 filler
    let lm = FnLm::new(5, 10, |ctx| {
        let mut l = vec![0.0; 5];
        match ctx.last() {
            Some(0) => l[3] = 5.0,
            Some(1) => l[2] = 5.0,
            _ => l[4] = 5.0,
        }
        l
    });
    let a = word_swap_action(&WordSets {
        equality: vec![vec![0, 1]],
        neutral: vec![2, 3, 4],
        general: vec![],
        d: 2,
    })
    .unwrap();
    let scorer = LexiconScorer::new([(2, 1.0), (3, -1.0)]);
    let opts = GenOptions {
        beam: 1,
        total_tokens: 1,
        ..GenOptions::default()
    };
    let g = equizero_generate(&lm, &a, &scorer, &[0], &opts).unwrap();
    assert_eq!(g.g_star_trace(), vec![1]);
    assert_eq!(g.tokens, vec![2]);
    assert_eq!(g.rounds[0].scores, vec![(-1.0f64).tanh(), 1.0f64.tanh()]);
    let line: serde_json::Value = serde_json::from_str(g.to_json_lines().lines().next().unwrap()).unwrap();
    assert_eq!(line["g_star"], 1);
    assert_eq!(line["tokens"], serde_json::json!([2]));
}

#[test]
fn score_ties_fall_back_to_log_probability_then_index() {
    let lm = FnLm::new(5, 10, |ctx| {
        let mut l = vec![0.0; 5];
        match ctx.last() {
            Some(0) => l[4] = 1.0,
            Some(1) => l[4] = 3.0,
            _ => l[4] = 2.0,
        }
        l
    });
    let a = word_swap_action(&WordSets {
        equality: vec![vec![0, 1]],
        neutral: vec![2, 3, 4],
        general: vec![],
        d: 2,
    })
    .unwrap();
    let flat = |_: &[usize]| 0.0;
    let opts = GenOptions {
        beam: 1,
        total_tokens: 1,
        ..GenOptions::default()
    };
    assert_eq!(equizero_generate(&lm, &a, &flat, &[0], &opts).unwrap().g_star_trace(), vec![1]);
    assert_eq!(equizero_generate(&lm, &a, &flat, &[1], &opts).unwrap().g_star_trace(), vec![0]);
    assert_eq!(equizero_generate(&lm, &a, &flat, &[4], &opts).unwrap().g_star_trace(), vec![0]);
}

#[test]
fn generation_is_swap_equivariant() {
    let a = word_swap_action(&tiny_sets(false)).unwrap();
    // swap-invariant scorer with distinct weights on every fixed word
    let scorer = LexiconScorer::new([0, 3, 4, 7, 8, 9].into_iter().map(|t| (t, 0.1 + 0.0371 * t as f64 * (t % 3) as f64 - 0.05 * (t % 2) as f64)));
    let mut rng = substream(7, "contexts");
    for case in 0..50u64 {
        let lm = random_lm(10, 100 + case);
        let len = 1 + (case as usize % 4);
        // an equality word keeps the branches distinct, so their log-probabilities differ
        let mut ctx = vec![1];
        ctx.extend((0..len).map(|_| rand::Rng::gen_range(&mut rng, 0..10)));
        let moved_ctx = a.act_tokens(1, &ctx).unwrap();
        let opts = GenOptions {
            beam: 2,
            total_tokens: 6,
            ..GenOptions::default()
        };
        let base = equizero_generate(&lm, &a, &scorer, &ctx, &opts).unwrap();
        let moved = equizero_generate(&lm, &a, &scorer, &moved_ctx, &opts).unwrap();
        assert_eq!(moved.tokens, a.act_tokens(1, &base.tokens).unwrap(), "case {case}");
        let flipped: Vec<usize> = base.g_star_trace().iter().map(|g| 1 - g).collect();
        assert_eq!(moved.g_star_trace(), flipped);
        let tuned = equitune_generate(&lm, &a, &ctx, &opts).unwrap();
        let tuned_moved = equitune_generate(&lm, &a, &moved_ctx, &opts).unwrap();
        assert_eq!(tuned_moved.tokens, a.act_tokens(1, &tuned.tokens).unwrap());
    }
}

#[test]
fn averaged_distribution_is_a_distribution() {
    let a = word_swap_action(&tiny_sets(false)).unwrap();
    let relaxed = tiny_sets(true);
    for seed in 0..10 {
        let lm = random_lm(10, seed);
        let ctx = [0, 1, 5, 3];
        for general in [Vec::new(), relaxed.general.clone()] {
            let p = averaged_distribution(&lm, &a, &ctx, &general).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&q| q >= 0.0));
        }
        let p = lm.next_distribution(&ctx).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn averaged_distribution_matches_hand_average() {
    let a = word_swap_action(&tiny_sets(false)).unwrap();
    let lm = random_lm(10, 4);
    let ctx = vec![0, 1, 3, 5];
    let p0 = lm.next_distribution(&ctx).unwrap();
    let p1 = lm.next_distribution(&a.act_tokens(1, &ctx).unwrap()).unwrap();
    let avg = averaged_distribution(&lm, &a, &ctx, &[]).unwrap();
    for t in 0..10 {
        // g⁻¹·p1 puts p1[g t] at t
        let moved = p1[a.map_token(1, t).unwrap()];
        assert!((avg[t] - 0.5 * (p0[t] + moved)).abs() < 1e-15);
    }
}

#[test]
fn swap_symmetric_lm_needs_no_averaging() {
    // logits depend on the context only through swap-invariant features
    let a = word_swap_action(&tiny_sets(false)).unwrap();
    let a2 = a.clone();
    let lm = FnLm::new(10, 20, move |ctx| {
        let canon: Vec<usize> = ctx.iter().map(|&t| t.min(a2.map_token(1, t).unwrap())).collect();
        let mut l: Vec<f64> = (0..10).map(|t| ((t * 7 + canon.iter().sum::<usize>()) % 5) as f64 * 0.3).collect();
        // pairs get equal logits so the output is swap-invariant too
        for pair in [[1, 2], [5, 6]] {
            l[pair[1]] = l[pair[0]];
        }
        l
    });
    let ctx = [0, 2, 3];
    let p = lm.next_distribution(&ctx).unwrap();
    let avg = averaged_distribution(&lm, &a, &ctx, &[]).unwrap();
    assert!(p.iter().zip(&avg).all(|(x, y)| (x - y).abs() < 1e-15));
}

#[test]
fn fairness_disparity_is_zero_for_equizero_outputs() {
    let corpus = toy_corpus(200, 0.8, 3);
    let ws = WordSets::resolve(&toy_word_sets(), &corpus.vocab, false).unwrap();
    let a = word_swap_action(&ws).unwrap();
    let lm = random_lm(corpus.vocab.len(), 5);
    let opts = GenOptions {
        beam: 3,
        total_tokens: 9,
        ..GenOptions::default()
    };
    let mut groups = vec![Vec::new(), Vec::new()];
    for text in ["the man was known for", "the boy worked as", "he was very"] {
        let ctx = corpus.vocab.encode(text).unwrap();
        for (k, c) in [ctx.clone(), a.act_tokens(1, &ctx).unwrap()].into_iter().enumerate() {
            let mut full = c.clone();
            full.extend(equizero_generate(&lm, &a, &corpus.scorer, &c, &opts).unwrap().tokens);
            groups[k].push(full);
        }
    }
    let report = fairness_eval_normalized(&groups, &a, &corpus.scorer).unwrap();
    assert_eq!(report.disparity, 0.0);
    assert_eq!(report.means[0], report.means[1]);
}

#[test]
fn fairness_eval_basics() {
    let scorer = LexiconScorer::new([(1, 1.0), (2, -1.0)]);
    let same = vec![vec![vec![1, 0], vec![2]], vec![vec![1, 0], vec![2]]];
    assert_eq!(fairness_eval(&same, &scorer).unwrap().disparity, 0.0);
    let single = fairness_eval(&[vec![vec![1]], vec![vec![2]]], &scorer).unwrap();
    for h in &single.histograms {
        assert_eq!(h.iter().filter(|&&x| x == 1.0).count(), 1);
    }
    assert_eq!(single.disparity, 1.0);
    assert!(fairness_eval(&[vec![]], &scorer).is_err());
}

#[test]
fn trace_log_probabilities_factorize() {
    let v = tiny_vocab();
    let a = word_swap_action(&tiny_sets(false)).unwrap();
    let lm = random_lm(10, 9);
    let ctx = vec![0, 1, 3];
    let opts = GenOptions {
        beam: 2,
        total_tokens: 7,
        ..GenOptions::default()
    };
    let g = equizero_generate(&lm, &a, &tiny_scorer(&v), &ctx, &opts).unwrap();
    // recompute each token's conditional in the frame of the branch that produced it
    let mut full = ctx.clone();
    let mut total = 0.0;
    for step in &g.steps {
        let t = g.tokens[step.position - ctx.len()];
        let frame = a.act_tokens(step.branch, &full).unwrap();
        let p = lm.next_distribution(&frame).unwrap();
        total += p[a.map_token(step.branch, t).unwrap()].ln();
        full.push(t);
    }
    assert!((total - g.log_prob).abs() <= 1e-9);
    let t = equitune_generate(&lm, &a, &ctx, &opts).unwrap();
    let mut full = ctx.clone();
    let mut total = 0.0;
    for &tok in &t.tokens {
        total += averaged_distribution(&lm, &a, &full, &[]).unwrap()[tok].ln();
        full.push(tok);
    }
    assert!((total - t.log_prob).abs() <= 1e-9);
}

#[test]
fn context_limits_are_enforced() {
    let lm = random_lm(10, 1);
    assert!(matches!(lm.next_distribution(&[0; 41]), Err(SeqError::ContextTooLong { .. })));
    assert!(matches!(lm.next_distribution(&[12]), Err(SeqError::TokenOutOfRange { .. })));
    let bad = GenOptions {
        beam: 0,
        ..GenOptions::default()
    };
    assert!(greedy_generate(&lm, &[0], &bad).is_err());
}

#[test]
fn lm_training_reduces_loss_and_gradients_check() {
    let corpus = toy_corpus(100, 0.8, 1);
    let mut lm = random_lm(corpus.vocab.len(), 2);
    let losses = train_lm(&mut lm, &corpus.sentences, &LmTrainOpts { steps: 60, batch: 4, lr: 1e-2 }, 0).unwrap();
    assert!(losses.last().unwrap() < &(losses[0] * 0.7), "{:?}", (losses[0], losses.last()));
    let small = random_lm(6, 3);
    let report = grad_check(small.params(), |tape, s| Ok(small.sentence_loss(s, tape, &[0, 3, 5, 1], ParamMode::Train).unwrap())).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    let f = small.predict(&Point::Tokens(vec![1, 2])).unwrap();
    assert_eq!(f.shape(), &[6]);
}

proptest! {
    #[test]
    fn scores_are_bounded(tokens in proptest::collection::vec(0usize..10, 0..30)) {
        let s = tiny_scorer(&tiny_vocab()).score(&tokens);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn swap_action_is_an_involution(tokens in proptest::collection::vec(0usize..10, 0..20)) {
        let a = word_swap_action(&tiny_sets(false)).unwrap();
        prop_assert_eq!(a.act_tokens(1, &a.act_tokens(1, &tokens).unwrap()).unwrap(), tokens);
    }
}
