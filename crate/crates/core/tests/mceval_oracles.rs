//! Extended metrics against straightforward re-implementations working from
//! the raw `[token][sample][class]` arrays.

use eve_lm::data::{make_windows, toy_corpus, WindowSpec};
use eve_lm::mceval::*;
use eve_lm::model::{FfnMode, Model, ModelConfig};
use eve_lm::objective::ObjectiveWeights;
use eve_lm::rng::Rng;
use proptest::prelude::*;

mod common;
use common::*;

#[test]
fn metrics_match_brute_force_on_random_fixtures() {
    let mut rng = Rng::new(2024);
    for case in 0..100 {
        let f = random_fixture(&mut rng);
        let alpha = [0.05, 0.1, 0.3, 0.5, 1.0][case % 5];
        let bins = [15, 10, 5, 1][case % 4];
        let pairs = metric_pairs(&f, alpha, bins);
        for (name, got, w) in pairs {
            assert!((got - w).abs() < 1e-9, "case {case} {name}: {got} vs {w}");
        }
    }
}

#[test]
fn full_tail_cvar_is_the_mean_nll() {
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let stats = prediction(&random_fixture(&mut rng)).token_stats();
        assert_eq!(cvar_nll(&stats, 1.0), nll_mc(&stats));
    }
}

proptest! {
    #[test]
    fn metric_ranges(seed in 0u64..10_000) {
        let f = random_fixture(&mut Rng::new(seed));
        let stats = prediction(&f).token_stats();
        let e = ece(&stats, 15);
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(mutual_information(&stats) >= 0.0);
        prop_assert!(conditional_variance_mc(&stats) >= 0.0);
        let fl = top1_flip_rate(&stats);
        prop_assert!((0.0..=1.0).contains(&fl));
        prop_assert!(cvar_nll(&stats, 0.05) >= nll_mc(&stats) - 1e-12);
        let r = epistemic_ratio(&stats);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&r));
        for s in &stats {
            prop_assert!(s.mutual_information() <= s.predictive_entropy + 1e-12);
        }
    }

    #[test]
    fn sample_order_does_not_matter(seed in 0u64..10_000) {
        let f = random_fixture(&mut Rng::new(seed));
        let mut shuffled = Fixture { probs: f.probs.clone(), targets: f.targets.clone() };
        let mut rng = Rng::new(seed + 1);
        for t in shuffled.probs.iter_mut() {
            rng.shuffle(t);
        }
        let a = prediction(&f).token_stats();
        let b = prediction(&shuffled).token_stats();
        prop_assert_eq!(mutual_information(&a), mutual_information(&b));
        prop_assert_eq!(conditional_variance_mc(&a), conditional_variance_mc(&b));
        prop_assert_eq!(nll_mc(&a), nll_mc(&b));
        prop_assert_eq!(ece(&a, 15), ece(&b, 15));
        prop_assert_eq!(top1_flip_rate(&a), top1_flip_rate(&b));
    }
}

fn one_token(samples: Vec<Vec<f64>>, target: usize) -> TokenStats {
    prediction(&Fixture {
        probs: vec![samples],
        targets: vec![target],
    })
    .token_stats()[0]
}

#[test]
fn small_fixtures() {
    // ECE, two bins: conf 0.9 right and 0.8 wrong share the upper bin,
    // conf 0.4 right sits alone in the lower one
    let f = Fixture {
        probs: vec![
            vec![vec![0.9, 0.1, 0.0]],
            vec![vec![0.2, 0.8, 0.0]],
            vec![vec![0.3, 0.3, 0.4]],
        ],
        targets: vec![0, 0, 2],
    };
    let stats = prediction(&f).token_stats();
    let want = 2.0 / 3.0 * (0.5f64 - 0.85).abs() + 1.0 / 3.0 * (1.0f64 - 0.4).abs();
    assert!((ece(&stats, 2) - want).abs() < 1e-12);

    // confidence 1 everywhere
    let right = one_token(vec![vec![1.0, 0.0]], 0);
    let wrong = one_token(vec![vec![1.0, 0.0]], 1);
    assert_eq!(ece(&[right; 4], 15), 0.0);
    assert_eq!(ece(&[wrong; 4], 15), 1.0);
    assert_eq!(nll_mc(&[right]), 0.0);

    // uniform p̄ → ln V
    let u = one_token(vec![vec![0.25; 4]], 2);
    assert!((u.nll - 4f64.ln()).abs() < 1e-15);

    // 10 tokens, 3 flip
    let steady = one_token(vec![vec![0.6, 0.4], vec![0.7, 0.3]], 0);
    let flip = one_token(vec![vec![0.6, 0.4], vec![0.3, 0.7]], 0);
    let mut toks = vec![steady; 7];
    toks.extend([flip; 3]);
    assert!((top1_flip_rate(&toks) - 0.3).abs() < 1e-15);

    // fully epistemic: every sample one-hot, p̄ spread
    let epi = one_token(
        vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ],
        0,
    );
    assert!((epistemic_ratio(&[epi]) - 100.0).abs() < 1e-12);

    // identical samples
    let same = one_token(vec![vec![0.2, 0.5, 0.3]; 8], 1);
    assert_eq!(same.mutual_information(), 0.0);
    assert_eq!(same.conditional_variance, 0.0);
    assert!(!same.flipped);
    assert_eq!(epistemic_ratio(&[same]), 0.0);

    // equal NLLs: any alpha
    let eq = one_token(vec![vec![0.5, 0.5]], 0);
    for a in [0.01, 0.3, 0.99] {
        assert_eq!(cvar_nll(&[eq; 7], a), eq.nll);
    }
}

#[test]
fn latent_usage_counts() {
    let zero = latent_usage(&[vec![0.0; 3]], &[vec![0.0; 6]], 1.0);
    assert_eq!(
        (zero.active_unit_fraction, zero.effective_active_dims),
        (0.0, 0)
    );
    let one = latent_usage(
        &[vec![1.0; 3], vec![1.0; 3]],
        &[vec![1.0; 6], vec![1.0; 6]],
        1.0,
    );
    assert_eq!(
        (one.active_unit_fraction, one.effective_active_dims),
        (1.0, 12)
    );
    let mixed = latent_usage(
        &[vec![0.5, 0.0], vec![2.0, 1e-9]],
        &[vec![0.3, 0.0, 0.0, 1.0], vec![0.0; 4]],
        0.7,
    );
    assert_eq!(mixed.active_unit_fraction, 0.5);
    assert_eq!(mixed.effective_active_dims, 2);
    assert_eq!(mixed.layer_active_fraction, vec![0.5, 0.0]);
}

fn small_cfg(mode: FfnMode) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_z: 2,
        n_units: 4,
        d_ff: 32,
        window_length: 24,
        ffn_mode: mode,
        ..ModelConfig::default()
    }
}

#[test]
fn deterministic_model_has_no_epistemic_signal() {
    let model = Model::new(small_cfg(FfnMode::Deterministic), 4).unwrap();
    let windows = make_windows(&toy_corpus(6, 1), &WindowSpec::new(24))
        .unwrap()
        .windows;
    let batch: Vec<_> = windows.iter().take(3).collect();
    let pred = mc_forward(&model, &batch, 8, &mut Rng::new(1)).unwrap();
    for t in 0..pred.n_tokens() {
        for s in 1..8 {
            assert_eq!(pred.sample(t, s), pred.sample(t, 0));
        }
        assert_eq!(pred.mean_probs(t), pred.sample(t, 0));
    }
    let w = ObjectiveWeights::default();
    let eight = evaluate(
        &model,
        &windows,
        &w,
        &EvalConfig::default(),
        &mut Rng::new(2),
    )
    .unwrap();
    let one = evaluate(
        &model,
        &windows,
        &w,
        &EvalConfig {
            mc_samples: 1,
            ..EvalConfig::default()
        },
        &mut Rng::new(3),
    )
    .unwrap();
    assert_eq!(eight.extended.mutual_information, 0.0);
    assert_eq!(eight.extended.conditional_variance_mc, 0.0);
    assert_eq!(eight.extended.top1_flip_rate_mc, 0.0);
    let strip = |mut e: ExtendedValidation| {
        e.mc_samples = 0;
        e
    };
    assert_eq!(strip(eight.extended), strip(one.extended));
    assert!((eight.final_validation.ppl - eight.final_validation.ce.exp()).abs() < 1e-12);
}

#[test]
fn variational_predictions_replay_from_the_seed() {
    let model = Model::new(small_cfg(FfnMode::Variational), 4).unwrap();
    let windows = make_windows(&toy_corpus(4, 2), &WindowSpec::new(24))
        .unwrap()
        .windows;
    let batch: Vec<_> = windows.iter().take(2).collect();
    let a = mc_forward(&model, &batch, 8, &mut Rng::new(9)).unwrap();
    let b = mc_forward(&model, &batch, 8, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    let single = mc_forward(&model, &batch, 1, &mut Rng::new(9)).unwrap();
    for t in 0..single.n_tokens() {
        assert_eq!(single.mean_probs(t), single.sample(t, 0));
    }
}
