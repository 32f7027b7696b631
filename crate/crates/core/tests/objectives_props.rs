use proptest::prelude::*;

use rlvr_lab::gradan::{grpo_token_weight, real_rollout_weight, Class};
use rlvr_lab::objectives::{
    compute_loss, group_advantages, real_loss, rollout_score, unified_ce, KlAnchors, KlMode, LossSpec, Method,
};
use rlvr_lab::verify::scored_group;

fn scores_and_rewards() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..12).prop_flat_map(|g| {
        (
            prop::collection::vec(-10.0f64..10.0, g),
            prop::collection::vec(0u8..=1, g),
        )
    })
}

proptest! {
    #[test]
    fn advantages_are_normalised(rewards in prop::collection::vec(0u8..=1, 2..16)) {
        let adv = group_advantages(&rewards).unwrap();
        let all_same = rewards.iter().all(|&r| r == rewards[0]);
        prop_assert_eq!(adv.degenerate, all_same);
        if !all_same {
            let n = adv.values.len() as f64;
            let mean = adv.values.iter().sum::<f64>() / n;
            let var = adv.values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-12);
            for (a, r) in adv.values.iter().zip(&rewards) {
                prop_assert_eq!(*a > 0.0, *r == 1);
            }
        }
    }

    #[test]
    fn real_audit_weights_match_closed_form((scores, rewards) in scores_and_rewards(), tau in 0.1f64..3.0) {
        let (policy, group) = scored_group(&scores, &rewards).unwrap();
        let spec = LossSpec { tau, ..LossSpec::for_method(Method::Real) };
        let out = real_loss(&policy, &group, &spec, &KlAnchors::none()).unwrap();
        let actual: Vec<f64> = group.rollouts.iter().map(|r| rollout_score(&policy, r).unwrap()).collect();
        for w in &out.rollout_weights {
            let class = if w.positive { Class::Positive } else { Class::Negative };
            let others: Vec<f64> = actual
                .iter()
                .zip(&rewards)
                .enumerate()
                .filter(|(j, (_, r))| *j != w.rollout && (**r == 1) == w.positive)
                .map(|(_, (s, _))| *s)
                .collect();
            let closed = real_rollout_weight(actual[w.rollout], class, &others, tau).unwrap();
            prop_assert!((w.magnitude - closed).abs() <= 1e-12 * closed.max(1.0));
            prop_assert!(w.magnitude < 1.0 / tau + 1e-9);
        }
    }

    #[test]
    fn unified_ce_equals_pairwise_sum(
        zp in prop::collection::vec(-6.0f64..6.0, 1..6),
        zn in prop::collection::vec(-6.0f64..6.0, 1..6),
    ) {
        let pairs: f64 = zp.iter().flat_map(|p| zn.iter().map(move |n| (n - p).exp())).sum();
        prop_assert!((unified_ce(&zp, &zn) - (1.0 + pairs).ln()).abs() < 1e-9);
    }

    #[test]
    fn degenerate_groups_split_the_methods(scores in prop::collection::vec(-3.0f64..3.0, 2..8), reward in 0u8..=1) {
        let rewards = vec![reward; scores.len()];
        let (policy, group) = scored_group(&scores, &rewards).unwrap();
        for m in [Method::Grpo, Method::Dapo, Method::Gspo] {
            let spec = LossSpec { kl_mode: KlMode::None, ..LossSpec::for_method(m) };
            let out = compute_loss(&policy, &group, &spec, &KlAnchors::none()).unwrap();
            prop_assert!(out.degenerate && out.grad.is_zero() && out.loss == 0.0);
        }
        let real = compute_loss(&policy, &group, &LossSpec::for_method(Method::Real), &KlAnchors::none()).unwrap();
        prop_assert!(!real.degenerate && real.grad.max_abs() > 0.0);
    }

    #[test]
    fn grpo_audit_weights_follow_ratio(scores in prop::collection::vec(-0.6f64..0.6, 4), rewards in prop::collection::vec(0u8..=1, 4)) {
        let mut rewards = rewards;
        rewards[0] = 1;
        rewards[1] = 0;
        let (policy, group) = scored_group(&scores, &rewards).unwrap();
        let spec = LossSpec { kl_mode: KlMode::None, ..LossSpec::for_method(Method::Grpo) };
        let adv = group_advantages(&rewards).unwrap();
        let out = compute_loss(&policy, &group, &spec, &KlAnchors::none()).unwrap();
        for w in &out.token_weights {
            let s = rollout_score(&policy, &group.rollouts[w.rollout]).unwrap();
            let expect = grpo_token_weight(s, adv.values[w.rollout], spec.clip);
            prop_assert_eq!(expect.clipped, w.clipped);
            prop_assert_eq!(expect.magnitude, w.magnitude);
        }
    }
}
