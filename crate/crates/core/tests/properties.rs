mod common;

use common::{all_keys, endless_lm, random_lm};
use ivg::guidance::{guided_next_distribution, GuidanceConfig};
use ivg::harness::{closed_form_counts, generate, verify_complexity, MethodId, ModelSet, ValueKind};
use ivg::lm::{context_key, sample_token, sequence_logprob, shape_distribution, TokenDistribution, TokenSequence};
use ivg::rng::stream;
use ivg::training::{dpo_loss, PreferenceExample};
use ivg::values::{ExplicitValueFn, ImplicitValueFn};
use proptest::prelude::*;
use rand::Rng;

fn logits(max_v: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, 2..=max_v)
}

proptest! {
    #[test]
    fn shaped_distributions_are_normalized(
        l in logits(16),
        t in 0.2..3.0f64,
        k in prop::option::of(1usize..16),
        p in prop::option::of(0.05..=1.0f64),
    ) {
        let d = shape_distribution(&l, t, k, p).unwrap();
        prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.probs().iter().all(|&x| x >= 0.0));
        if let Some(k) = k {
            prop_assert!(d.probs().iter().filter(|&&x| x > 0.0).count() <= k);
        }
        // the most likely token always survives truncation
        let top = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap();
        prop_assert!(d.probs()[top] > 0.0);
    }

    #[test]
    fn guidance_tilts_toward_higher_values(
        (l, deltas) in (2usize..12).prop_flat_map(|v| (
            prop::collection::vec(-4.0..4.0f64, v),
            prop::collection::vec(-3.0..3.0f64, v),
        )),
        beta in 0.0..4.0f64,
    ) {
        let base = shape_distribution(&l, 1.0, None, None).unwrap();
        let g = guided_next_distribution(&base, &deltas, beta).unwrap();
        prop_assert!((g.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..l.len() {
            for j in 0..l.len() {
                if deltas[i] >= deltas[j] {
                    let tilted = g.probs()[i] / g.probs()[j];
                    let plain = base.probs()[i] / base.probs()[j];
                    prop_assert!(tilted >= plain * (1.0 - 1e-12));
                }
            }
        }
    }

    #[test]
    fn truncated_tokens_are_never_sampled(l in logits(10), k in 1usize..4, seed in any::<u64>()) {
        let d = shape_distribution(&l, 1.0, Some(k), None).unwrap();
        let mut rng = stream(seed, &[]);
        for _ in 0..50 {
            prop_assert!(d.prob(sample_token(&d, &mut rng)) > 0.0);
        }
    }

    #[test]
    fn log_probability_is_additive(seed in any::<u64>(), split in 0usize..6, order in 0usize..4) {
        let mut rng = stream(seed, &[]);
        let lm = random_lm(5, order, 2.0, &mut rng);
        let prompt = common::random_content(5, 2, &mut rng);
        let response = common::random_tokens(5, 6, &mut rng);
        let whole = sequence_logprob(&lm, &TokenSequence::new(prompt.clone(), response.clone()), 0.8);
        let head = sequence_logprob(&lm, &TokenSequence::new(prompt.clone(), response[..split].to_vec()), 0.8);
        let tail = sequence_logprob(&lm, &TokenSequence::new([prompt, response[..split].to_vec()].concat(), response[split..].to_vec()), 0.8);
        prop_assert!((whole - head - tail).abs() < 1e-10);
    }

    #[test]
    fn context_keys_have_the_model_order(
        prompt in prop::collection::vec(0u32..6, 0..5),
        prefix in prop::collection::vec(0u32..6, 0..5),
        order in 0usize..=8,
    ) {
        let key = context_key(&prompt, &prefix, order, 0);
        prop_assert_eq!(key.len(), order);
        let full: Vec<u32> = prompt.iter().chain(&prefix).copied().collect();
        let tail = &full[full.len().saturating_sub(order)..];
        prop_assert_eq!(&key[order - tail.len()..], tail);
    }

    #[test]
    fn dpo_ignores_per_context_shifts_of_the_reference(seed in any::<u64>(), shift in -5.0..5.0f64) {
        let mut rng = stream(seed, &[]);
        let policy = random_lm(5, 1, 1.0, &mut rng);
        let reference = random_lm(5, 1, 1.0, &mut rng);
        let mut shifted = reference.clone();
        for key in all_keys(5, 1) {
            let row = shifted.logits_for_key(&key).iter().map(|x| x + shift * (key[0] as f64 + 1.0)).collect();
            shifted.set_logits(key, row).unwrap();
        }
        let batch: Vec<PreferenceExample> = (0..4)
            .map(|_| PreferenceExample {
                prompt: vec![rng.gen_range(2..5)],
                chosen: vec![rng.gen_range(2..5), 1],
                rejected: vec![rng.gen_range(2..5), rng.gen_range(2..5), 1],
            })
            .collect();
        let (a, ga) = dpo_loss(&policy, &reference, &batch, 0.3);
        let (b, gb) = dpo_loss(&policy, &shifted, &batch, 0.3);
        prop_assert!((a - b).abs() < 1e-10);
        for (key, g) in &ga {
            for (x, y) in g.iter().zip(&gb[key]) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn implicit_values_ignore_logit_shifts(seed in any::<u64>(), shift in -5.0..5.0f64) {
        let mut rng = stream(seed, &[]);
        let tuned = random_lm(6, 2, 1.0, &mut rng);
        let reference = random_lm(6, 2, 1.0, &mut rng);
        let mut shifted = tuned.clone();
        for key in all_keys(6, 2) {
            let row = shifted.logits_for_key(&key).iter().map(|x| x + shift).collect();
            shifted.set_logits(key, row).unwrap();
        }
        let a = ImplicitValueFn::new(&tuned, &reference, 0.7).unwrap();
        let b = ImplicitValueFn::new(&shifted, &reference, 0.7).unwrap();
        let prefix = common::random_tokens(6, 3, &mut rng);
        for (x, y) in a.token_scores_after(&[2], &prefix).iter().zip(b.token_scores_after(&[2], &prefix)) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn guided_distribution_of_a_point_mass_is_that_point_mass(v in 2usize..10, at in 0usize..10, beta in 0.0..5.0f64) {
        let at = at % v;
        let mut p = vec![0.0; v];
        p[at] = 1.0;
        let base = TokenDistribution::new(p).unwrap();
        let deltas: Vec<f64> = (0..v).map(|i| i as f64).collect();
        prop_assert_eq!(guided_next_distribution(&base, &deltas, beta).unwrap(), base);
    }
}

fn accounting_models(seed: u64) -> ModelSet {
    let mut rng = stream(seed, &[]);
    let mut explicit = ExplicitValueFn::new(2, 0, 0.0).unwrap();
    for key in all_keys(6, 2) {
        explicit.set_value(key, rng.gen_range(-1.0..1.0)).unwrap();
    }
    ModelSet {
        base: endless_lm(6, 2, &mut rng),
        tuned: Some(random_lm(6, 1, 1.0, &mut rng)),
        reference: Some(random_lm(6, 1, 1.0, &mut rng)),
        explicit: Some(explicit),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_pass_counts_follow_the_closed_form(
        w in 1usize..=4, k in 1usize..=4, l in 1usize..=4, n in 1usize..=4,
        len in 1usize..=40, seed in any::<u64>(), beta in 0.0..2.0f64,
    ) {
        let models = accounting_models(seed % 8);
        let cfg = GuidanceConfig { beta, beam_width: w, successors: k, chunk_len: l, num_samples: n, max_len: len, ..Default::default() };
        for m in MethodId::named() {
            let r = generate(m, &models, &[2, 3], &cfg, seed).unwrap();
            prop_assert!(verify_complexity(m, 6, &r).matches, "{}", m.name());
            prop_assert_eq!(r.fwd_counts, closed_form_counts(m, &cfg, 6, len), "{}", m.name());
            prop_assert_eq!(r.seq.response.len(), len);
        }
        let grid_only = MethodId::combo(ValueKind::Explicit, ValueKind::Implicit);
        let r = generate(grid_only, &models, &[2, 3], &cfg, seed).unwrap();
        prop_assert_eq!(r.fwd_counts, closed_form_counts(grid_only, &cfg, 6, len));
    }
}
