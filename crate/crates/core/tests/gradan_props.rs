use proptest::prelude::*;

use rlvr_lab::gradan::{
    fd_check, grpo_token_weight, ratio_bin_stats, real_weight, weight_curve, Class, CurveMethod, RatioBin,
};
use rlvr_lab::objectives::{ClipRange, KlAnchors, KlMode, LossSpec, Method};
use rlvr_lab::policy::{ContextKey, Policy, TabularPolicy};
use rlvr_lab::rollout::{Group, Rollout, Task};
use rlvr_lab::verify::synthetic_log;

proptest! {
    #[test]
    fn real_weight_is_bounded_and_monotone(
        a in -20.0f64..20.0,
        b in -20.0f64..20.0,
        c in 1.0f64..50.0,
        tau in 0.05f64..5.0,
    ) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let pos = (real_weight(lo, Class::Positive, c, tau), real_weight(hi, Class::Positive, c, tau));
        let neg = (real_weight(lo, Class::Negative, c, tau), real_weight(hi, Class::Negative, c, tau));
        prop_assert!(pos.0 >= pos.1);
        prop_assert!(neg.0 <= neg.1);
        for w in [pos.0, pos.1, neg.0, neg.1] {
            prop_assert!(w >= 0.0);
            // saturates to exactly 1/tau once e^(±s/tau) underflows
            prop_assert!(w <= 1.0 / tau);
        }
    }

    #[test]
    fn grpo_weight_grows_exponentially_until_clipped(s in -0.15f64..0.15, d in 0.0f64..0.02) {
        let clip = ClipRange::symmetric(0.2);
        let a = grpo_token_weight(s, 1.0, clip);
        let b = grpo_token_weight(s + d, 1.0, clip);
        prop_assert!(!a.clipped && !b.clipped);
        prop_assert!(((b.magnitude / a.magnitude).ln() - d).abs() < 1e-12);
    }

    #[test]
    fn curve_grids_are_ordered(lo in -5.0f64..0.0, span in 0.1f64..10.0, n in 2usize..200) {
        let curve = weight_curve(CurveMethod::Real { class: Class::Negative, c: 3.0, tau: 1.0 }, lo, lo + span, n).unwrap();
        prop_assert_eq!(curve.samples.len(), n);
        prop_assert_eq!(curve.samples[0].0, lo);
        prop_assert_eq!(curve.samples[n - 1].0, lo + span);
        prop_assert!(curve.samples.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
    }
}

#[test]
fn bin_boundaries_count_as_unclipped() {
    let clip = ClipRange::symmetric(0.2);
    assert_eq!(RatioBin::of(0.8, clip), RatioBin::LowerToOne);
    assert_eq!(RatioBin::of(1.0, clip), RatioBin::OneToUpper);
    assert_eq!(RatioBin::of(1.2, clip), RatioBin::OneToUpper);
    assert_eq!(RatioBin::of(1.2000001, clip), RatioBin::AboveUpper);
    assert_eq!(RatioBin::of(0.7999999, clip), RatioBin::BelowLower);
}

#[test]
fn bin_percentages_sum_to_one_hundred() {
    let clip = ClipRange::symmetric(0.2);
    let (policy, records) = synthetic_log(clip).unwrap();
    let report = ratio_bin_stats(&records, &policy, clip).unwrap();
    for class in [&report.positives, &report.negatives] {
        assert!(class.tokens > 0);
        let total: f64 = class.bins.iter().map(|b| b.percent).sum();
        assert!((total - 100.0).abs() < 1e-9, "{total}");
        assert_eq!(class.bins.iter().map(|b| b.tokens).sum::<usize>(), class.tokens);
        for b in &class.bins {
            if b.clipped {
                assert!(b.avg_magnitude.is_none() || b.avg_magnitude == Some(0.0));
            }
        }
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 9);
    assert_eq!(csv.lines().filter(|l| l.ends_with(",-")).count(), 2);
}

#[test]
fn token_on_the_clip_bound_is_excluded_from_fd() {
    let task = Task::Parity { bits: 1 };
    let mut policy = TabularPolicy::new(1, task.vocab()).unwrap();
    let ctx = ContextKey::at(0, 1, &[]);
    policy.set_row(ctx.clone(), vec![0.3, -0.2, 0.1]).unwrap();
    let lp = |t: u32| policy.token_logprob(&ctx, t).unwrap();
    // rollout 0 is correct (prompt 0 has parity 0), ratio exactly 1.2
    let on_bound = Rollout::new(0, vec![0], vec![lp(0) - 1.2f64.ln()], 1).unwrap();
    let wrong = Rollout::new(0, vec![1], vec![lp(1)], 0).unwrap();
    let group = Group::new(task.prompt(0).unwrap(), vec![on_bound, wrong]).unwrap();
    let spec = LossSpec {
        kl_mode: KlMode::None,
        ..LossSpec::for_method(Method::Grpo)
    };
    let report = fd_check(&spec, &policy, &group, &KlAnchors::none(), 1e-5).unwrap();
    assert_eq!(report.excluded, 3);
    assert_eq!(report.compared, 0);
}

#[test]
fn fd_agrees_away_from_bounds() {
    let task = Task::Parity { bits: 2 };
    let mut policy = TabularPolicy::new(2, task.vocab()).unwrap();
    policy.set_row(ContextKey::at(1, 2, &[]), vec![0.4, -0.3, 0.2]).unwrap();
    policy
        .set_row(ContextKey::at(1, 2, &[0]), vec![-0.1, 0.5, 0.0])
        .unwrap();
    let rollouts = vec![
        Rollout::new(1, vec![1, 2], vec![-1.1, -1.0], 1).unwrap(),
        Rollout::new(1, vec![0, 1, 2], vec![-1.0, -0.9, -1.2], 1).unwrap(),
        Rollout::new(1, vec![0, 2], vec![-1.05, -1.1], 0).unwrap(),
        Rollout::new(1, vec![2], vec![-1.2], 0).unwrap(),
    ];
    let group = Group::new(task.prompt(1).unwrap(), rollouts).unwrap();
    for method in Method::ALL {
        let spec = LossSpec {
            kl_mode: KlMode::None,
            ..LossSpec::for_method(method)
        };
        let report = fd_check(&spec, &policy, &group, &KlAnchors::none(), 1e-5).unwrap();
        assert!(report.compared > 0, "{method:?}");
        assert!(report.max_rel_error < 1e-6, "{method:?}: {report:?}");
    }
}
