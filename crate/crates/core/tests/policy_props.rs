use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rlvr_lab::policy::{
    apply_update, AdamConfig, ContextKey, GradientVector, OptimizerState, Policy, TabularPolicy, Token, Vocab,
};

fn policy_with_row(row: Vec<f64>) -> (TabularPolicy, ContextKey) {
    let v = row.len() as u32;
    let mut p = TabularPolicy::new(2, Vocab::new(v, v - 1).unwrap()).unwrap();
    let ctx = ContextKey::at(7, 2, &[1]);
    p.set_row(ctx.clone(), row).unwrap();
    (p, ctx)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn logprob_grad_matches_finite_differences(
        row in prop::collection::vec(-6.0f64..6.0, 2..10),
        pick in 0usize..10,
    ) {
        let (p, ctx) = policy_with_row(row);
        let v = p.vocab().size();
        let tok = (pick % v) as Token;
        let grad = p.logprob_grad(&ctx, tok).unwrap();
        let analytic = grad.row(&ctx).unwrap();
        prop_assert!(analytic.iter().sum::<f64>().abs() < 1e-12);
        prop_assert_eq!(grad.len(), 1);
        let h = 1e-5;
        for (j, a) in analytic.iter().enumerate() {
            let mut probe = p.clone();
            probe.row_mut(&ctx)[j] += h;
            let up = probe.token_logprob(&ctx, tok).unwrap();
            probe.row_mut(&ctx)[j] -= 2.0 * h;
            let down = probe.token_logprob(&ctx, tok).unwrap();
            prop_assert!(((up - down) / (2.0 * h) - a).abs() < 1e-7);
        }
    }
}

proptest! {
    #[test]
    fn unwritten_rows_are_uniform(v in 2u32..12, prompt in 0u32..1000, order in 1usize..4) {
        let p = TabularPolicy::new(order, Vocab::new(v, 0).unwrap()).unwrap();
        let ctx = p.context(prompt, &[0, 0]);
        for t in 0..v {
            prop_assert_eq!(p.token_logprob(&ctx, t).unwrap(), -(v as f64).ln());
        }
        prop_assert!((p.entropy(&ctx) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn snapshot_is_frozen(row in prop::collection::vec(-4.0f64..4.0, 3..6), tok in 0u32..3) {
        let (mut p, ctx) = policy_with_row(row);
        let snap = p.snapshot();
        let first = snap.token_logprob(&ctx, tok).unwrap();
        p.row_mut(&ctx)[0] += 1.0;
        prop_assert_eq!(snap.token_logprob(&ctx, tok).unwrap().to_bits(), first.to_bits());
    }

    #[test]
    fn checkpoint_text_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 0..6)) {
        let mut p = TabularPolicy::new(3, Vocab::new(4, 3).unwrap()).unwrap();
        for (i, row) in rows.into_iter().enumerate() {
            p.set_row(ContextKey::at(i as u32, 3, &[i as u32 % 4]), row).unwrap();
        }
        let back = TabularPolicy::from_text(&p.to_text()).unwrap();
        prop_assert_eq!(back.fingerprint(), p.fingerprint());
        prop_assert_eq!(back, p);
    }

    #[test]
    fn adam_only_touches_gradient_rows(g in prop::collection::vec(-2.0f64..2.0, 3)) {
        let mut p = TabularPolicy::new(1, Vocab::new(3, 2).unwrap()).unwrap();
        let other = ContextKey::at(1, 1, &[]);
        p.set_row(other.clone(), vec![0.5, 0.5, 0.5]).unwrap();
        let target = ContextKey::at(0, 1, &[]);
        let mut grad = GradientVector::new();
        grad.row_mut(&target, 3).copy_from_slice(&g);
        let mut opt = OptimizerState::new();
        apply_update(&mut p, &grad, &mut opt, &AdamConfig::default()).unwrap();
        prop_assert_eq!(p.rows().find(|(c, _)| **c == other).unwrap().1, &[0.5, 0.5, 0.5][..]);
        prop_assert_eq!(opt.step, 1);
    }
}

#[test]
fn uniform_sampling_frequencies() {
    let p = TabularPolicy::new(1, Vocab::new(5, 4).unwrap()).unwrap();
    let ctx = p.context(0, &[]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[p.sample_token(&ctx, 1.0, &mut rng).unwrap() as usize] += 1;
    }
    let sigma = (n as f64 * 0.2 * 0.8).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * 0.2).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn dominant_row_is_sampled_almost_always() {
    let (p, ctx) = policy_with_row(vec![50.0, 0.0, 0.0, 0.0]);
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hits = (0..10_000)
            .filter(|_| p.sample_token(&ctx, 1.0, &mut rng).unwrap() == 0)
            .count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }
}
