//! Randomized property checks on the model, theory and replay building blocks.

use proptest::prelude::*;

use cfka_core::continual::{
    best_window, build_stored_replay, exact_jaccard, run_cpt, shingles, signature_similarity, ContinualMethod, CptConfig,
    DedupConfig, EvalHooks, MinHasher, StopRule, StoredRule,
};
use cfka_core::corpus::{gen_world, render_corpus, Augmentation, Phase, RelationConfig, Split, Token, World, WorldConfig};
use cfka_core::model::{
    forward, gradient, init_params, loss, read_params, sampling_distribution, softmax, write_params, AttentionVariant,
    DecodeConfig, ModelParams, TrainConfig,
};
use cfka_core::theory::Jacobian;

fn variant() -> impl Strategy<Value = AttentionVariant> {
    prop_oneof![Just(AttentionVariant::Linear), Just(AttentionVariant::Exponential), Just(AttentionVariant::Softmax)]
}

/// Random parameters plus a prompt and a gold label over the same vocabulary.
fn model_case() -> impl Strategy<Value = (ModelParams, Vec<Token>, Token)> {
    (3usize..9, variant(), any::<u64>(), 0.1f64..1.5).prop_flat_map(|(d, v, seed, eps)| {
        let p = init_params(d, eps, v, seed).unwrap();
        (Just(p), prop::collection::vec(0..d as Token, 1..7), 0..d as Token)
    })
}

fn small_world(seed: u64) -> World {
    let wc = WorldConfig {
        subject_pools: vec![6, 6],
        relations: ["birthday", "birthplace", "company"]
            .iter()
            .map(|r| RelationConfig { name: r.to_string(), object_pool: 8 })
            .collect(),
        relation_words: 4,
        common_words: 4,
        templates_per_relation: 4,
        pt_individuals: 12,
        cpt_individuals: 6,
        ..WorldConfig::default()
    };
    gen_world(&wc, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_gradient_matches_central_differences((p, prompt, gold) in model_case()) {
        let (_, g) = gradient(&p, &prompt, gold).unwrap();
        let f = |q: &ModelParams| loss(&forward(q, &prompt).unwrap(), gold);
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        for (t, col) in &g.y {
            for (o, &gv) in col.iter().enumerate() {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.set_y(o as Token, *t, p.y(o as Token, *t) + h);
                b.set_y(o as Token, *t, p.y(o as Token, *t) - h);
                prop_assert!(rel(gv, (f(&a) - f(&b)) / (2.0 * h)) < 1e-4);
            }
        }
        for &(t, gv) in &g.z {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.z_mut()[t as usize] += h;
            b.z_mut()[t as usize] -= h;
            prop_assert!(rel(gv, (f(&a) - f(&b)) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn prediction_is_a_distribution((p, prompt, _gold) in model_case()) {
        let pred = forward(&p, &prompt).unwrap();
        prop_assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pred.probs.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn softmax_jacobian_is_symmetric_psd_and_bounded(logits in prop::collection::vec(-6.0f64..6.0, 2..25)) {
        let x = softmax(&logits);
        let j = Jacobian::new(&x);
        prop_assert_eq!(j.max_asymmetry(), 0.0);
        prop_assert!(j.max_row_sum() < 1e-12);
        let ev = j.eigenvalues();
        prop_assert!(ev[0] > -1e-12);
        prop_assert!(*ev.last().unwrap() <= 0.5 + 1e-12);
    }

    #[test]
    fn softmax_ignores_a_constant_shift(logits in prop::collection::vec(-6.0f64..6.0, 1..25), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn params_survive_a_binary_round_trip((p, _prompt, _gold) in model_case()) {
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        prop_assert_eq!(read_params(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn truncated_sampling_stays_normalized(
        logits in prop::collection::vec(-5.0f64..5.0, 2..30),
        top_k in 1i64..10,
        top_p in 0.05f64..1.0,
        temperature in 0.2f64..2.0,
    ) {
        let cfg = DecodeConfig { top_k, top_p, temperature, ..DecodeConfig::default() };
        let probs = sampling_distribution(&logits, &cfg);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().filter(|&&p| p > 0.0).count() <= top_k as usize);
    }

    #[test]
    fn minhash_tracks_exact_jaccard(
        base in prop::collection::vec(0u32..40, 8..50),
        edits in prop::collection::vec((any::<prop::sample::Index>(), 0u32..40), 0..30),
    ) {
        let mut other = base.clone();
        for (i, t) in edits {
            let at = i.index(other.len());
            other[at] = t;
        }
        let cfg = DedupConfig::default();
        let h = MinHasher::new(&cfg);
        let exact = exact_jaccard(&shingles(&base, cfg.shingle_len), &shingles(&other, cfg.shingle_len));
        let est = signature_similarity(&h.signature(&base), &h.signature(&other));
        prop_assert!((est - exact).abs() <= 0.15, "estimate {est} exact {exact}");
        prop_assert_eq!(signature_similarity(&h.signature(&base), &h.signature(&base)), 1.0);
    }

    #[test]
    fn best_window_has_the_maximal_sum(att in prop::collection::vec(0.0f64..1.0, 1..20), len in 1usize..6) {
        let (start, score) = best_window(&att, len);
        let len = len.min(att.len());
        prop_assert!((att[start..start + len].iter().sum::<f64>() - score).abs() < 1e-12);
        for s in 0..=att.len() - len {
            let other: f64 = att[s..s + len].iter().sum();
            // earlier windows never tie or beat the winner
            prop_assert!(other <= score && (s >= start || other < score));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn world_json_round_trip(seed in any::<u64>()) {
        let w = small_world(seed);
        prop_assert_eq!(World::from_json(&w.to_json().unwrap()).unwrap(), w);
    }

    #[test]
    fn stored_rules_use_comparable_budgets(seed in any::<u64>()) {
        let w = small_world(seed);
        let train = render_corpus(&w, Augmentation::KAug(4), 1, seed).unwrap().split(Split::PT_TRAIN);
        let ids: Vec<u32> = w.individuals_in(Phase::Pt).map(|i| i.id).collect();
        let tokens = |rule| {
            build_stored_replay(&train, &ids, w.relation_count(), rule, seed).unwrap().corpus.token_count() as f64
        };
        let (one, half) = (tokens(StoredRule::AllOneBio), tokens(StoredRule::HalfTwoBios));
        prop_assert!((one - half).abs() / one < 0.05 + 1.0 / ids.len() as f64, "{one} vs {half}");
    }
}

#[test]
fn ewc_with_zero_strength_is_naive() {
    let w = small_world(5);
    let rc = render_corpus(&w, Augmentation::KAug(3), 1, 6).unwrap();
    let (pt, cpt) = (rc.split(Split::PT_TRAIN), rc.split(Split::CPT_TRAIN));
    let p = init_params(w.vocab_size, 0.3, AttentionVariant::Linear, 7).unwrap();
    let importance = vec![1.0; w.vocab_size * w.vocab_size];
    let hooks = EvalHooks { original: &pt, continual: &cpt, every: 100, query: w.query };
    let cc = CptConfig { train: TrainConfig::default(), stop: StopRule::Fixed(500), max_steps: 500, extra_steps: 0, seed: 8 };
    let (a, ta) = run_cpt(p.clone(), &cpt, None, &ContinualMethod::Naive, None, &cc, &hooks).unwrap();
    let (b, tb) = run_cpt(p, &cpt, None, &ContinualMethod::Ewc { k: 0.0 }, Some(&importance), &cc, &hooks).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.rows, tb.rows);
}

#[test]
fn replay_mixture_matches_alpha() {
    let w = small_world(9);
    let rc = render_corpus(&w, Augmentation::KAug(3), 1, 10).unwrap();
    let (pt, cpt) = (rc.split(Split::PT_TRAIN), rc.split(Split::CPT_TRAIN));
    let p = init_params(w.vocab_size, 0.3, AttentionVariant::Linear, 11).unwrap();
    let hooks = EvalHooks { original: &pt, continual: &cpt, every: 1_000, query: w.query };
    let n = 4_000;
    let cc = CptConfig { train: TrainConfig::default(), stop: StopRule::Fixed(n), max_steps: n, extra_steps: 0, seed: 12 };
    let alpha = 0.7;
    let method = ContinualMethod::StoredReplay { alpha, rule: StoredRule::AllOneBio };
    let (_, tr) = run_cpt(p, &cpt, Some(&pt), &method, None, &cc, &hooks).unwrap();
    let sigma = (alpha * (1.0 - alpha) / n as f64).sqrt();
    assert!((tr.realized_alpha() - alpha).abs() < 3.0 * sigma, "realized {}", tr.realized_alpha());
}
