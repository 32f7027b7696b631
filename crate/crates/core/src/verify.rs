//! Property suites that re-check the analytic gradient claims against
//! independent computations.
//!
//! Each suite returns one [`PropertyResult`] per property. Sizes default to
//! the release-gate counts and can be reduced through [`VerifyOptions`].

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradan::{
    fd_check_with, grpo_token_weight, numerical_gradient, ratio_bin_stats, real_rollout_weight, real_weight,
    weight_curve, Class, CurveMethod, FdReport, LossFn, RatioBin,
};
use crate::objectives::{
    compute_loss, group_advantages, grpo_loss, real_loss, unified_ce, Aggregation, ClipRange, KlAnchors, KlMode,
    LossOutput, LossSpec, Method,
};
use crate::policy::{ContextKey, Policy, PolicySnapshot, TabularPolicy, Token, Vocab};
use crate::rollout::{Group, Rollout, RolloutRecord, Task};
use crate::seed::SeedStream;

pub const SUITES: &[&str] = &[
    "gradients",
    "bounds",
    "monotonicity",
    "growth",
    "identities",
    "bins",
    "curves",
    "degenerate",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fd_instances: usize,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub bound_configs: usize,
    pub monotonic_triples: usize,
    pub growth_pairs: usize,
    pub identity_sets: usize,
    pub degenerate_groups: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fd_instances: 200,
            fd_step: 1e-5,
            fd_tolerance: 1e-6,
            bound_configs: 100_000,
            monotonic_triples: 10_000,
            growth_pairs: 10_000,
            identity_sets: 1_000,
            degenerate_groups: 100,
        }
    }
}

/// Run one suite by name, or all of them.
pub fn run(suite: Option<&str>, opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let selected: Vec<&str> = match suite {
        None | Some("all") => SUITES.to_vec(),
        Some(s) if SUITES.contains(&s) => vec![s],
        Some(s) => {
            return Err(Error::invalid(format!(
                "unknown suite {s:?}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    let mut out = Vec::new();
    for s in selected {
        out.extend(match s {
            "gradients" => gradients(opts)?,
            "bounds" => vec![bounds(opts)?, bce_bounds(opts)?, supremum()?],
            "monotonicity" => vec![monotonicity(opts)],
            "growth" => vec![growth(opts), clipped_tokens_are_zero()?],
            "identities" => vec![pairwise_identity(opts), decomposition(opts)?],
            "bins" => vec![bin_structure()?],
            "curves" => vec![curves()?],
            "degenerate" => vec![degenerate_contrast(opts)?],
            _ => unreachable!("suite list and match arms agree"),
        });
    }
    Ok(out)
}

/// A random loss-evaluation problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub policy: TabularPolicy,
    pub group: Group,
    pub spec: LossSpec,
    pub reference: PolicySnapshot,
    pub old: PolicySnapshot,
}

impl Instance {
    pub fn anchors(&self) -> KlAnchors<'_> {
        KlAnchors {
            reference: Some(&self.reference),
            old: Some(&self.old),
        }
    }
}

fn random_row<R: Rng>(rng: &mut R, v: usize, scale: f64) -> Vec<f64> {
    (0..v).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Random order-k policy, old policy and group with both reward classes
/// present. Old log-probs come from a perturbation of the current policy so
/// both sides of every clip bound occur.
pub fn random_instance<R: Rng>(rng: &mut R, method: Method) -> Result<Instance> {
    let v: u32 = rng.gen_range(3..=6);
    let vocab = Vocab::new(v, v - 1)?;
    let order = rng.gen_range(1..=3);
    let g = rng.gen_range(2..=8);
    let prompt = Task::ModSum { digits: 1 }.prompt(rng.gen_range(0..10))?;

    let mut rewards: Vec<u8> = (0..g).map(|_| rng.gen_range(0..=1)).collect();
    rewards[0] = 1;
    rewards[1] = 0;
    let token_lists: Vec<Vec<Token>> = (0..g)
        .map(|_| {
            let len = rng.gen_range(1..=5);
            let mut toks: Vec<Token> = (0..len).map(|_| rng.gen_range(0..v - 1)).collect();
            if rng.gen_bool(0.8) {
                *toks.last_mut().expect("len >= 1") = v - 1;
            }
            toks
        })
        .collect();

    let mut policy = TabularPolicy::new(order, vocab)?;
    let mut old = TabularPolicy::new(order, vocab)?;
    let mut reference = TabularPolicy::new(order, vocab)?;
    let noise = [0.0, 1e-4, 0.05, 0.3][rng.gen_range(0..4)];
    for toks in &token_lists {
        for t in 0..toks.len() {
            let ctx = ContextKey::at(prompt.id, order, &toks[..t]);
            if policy.row(&ctx).is_some() || rng.gen_bool(0.15) {
                continue;
            }
            let row = random_row(rng, v as usize, 1.5);
            let shifted: Vec<f64> = row.iter().map(|z| z + noise * rng.gen_range(-1.0..1.0)).collect();
            policy.set_row(ctx.clone(), row)?;
            old.set_row(ctx.clone(), shifted)?;
            reference.set_row(ctx, random_row(rng, v as usize, 1.0))?;
        }
    }

    let rollouts = token_lists
        .into_iter()
        .zip(&rewards)
        .map(|(tokens, &r)| {
            let old_lp = (0..tokens.len())
                .map(|t| old.token_logprob(&old.context(prompt.id, &tokens[..t]), tokens[t]))
                .collect::<Result<Vec<f64>>>()?;
            Rollout::new(prompt.id, tokens, old_lp, r)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut spec = LossSpec::for_method(method);
    spec.tau = rng.gen_range(0.2..2.0);
    spec.kl_mode = [KlMode::None, KlMode::Reference, KlMode::Old][rng.gen_range(0..3)];
    spec.beta = if spec.kl_mode == KlMode::None {
        0.0
    } else {
        rng.gen_range(0.001..0.1)
    };
    if method == Method::Grpo && rng.gen_bool(0.3) {
        spec.aggregation = Aggregation::TokenMean;
    }
    Ok(Instance {
        policy,
        group: Group::new(prompt, rollouts)?,
        spec,
        reference: reference.snapshot(),
        old: old.snapshot(),
    })
}

fn pass(suite: &'static str, name: impl Into<String>, passed: bool, detail: String) -> PropertyResult {
    PropertyResult {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

/// Finite-difference oracle for `loss` on `opts.fd_instances` random
/// instances of `method`.
pub fn fd_property<F: LossFn + Sync>(method: Method, loss: &F, opts: &VerifyOptions) -> Result<PropertyResult> {
    let seeds = SeedStream::new(opts.seed);
    let tag = Method::ALL.iter().position(|m| *m == method).unwrap_or(0) as u64;
    let reports = (0..opts.fd_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.rng("verify-fd", &[tag, i as u64]);
            let inst = random_instance(&mut rng, method)?;
            fd_check_with(
                loss,
                &inst.spec,
                &inst.policy,
                &inst.group,
                &inst.anchors(),
                opts.fd_step,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    // Instances whose analytic gradient is identically zero (symmetric
    // groups) have no relative scale; their FD result is pure roundoff and is
    // held to an absolute bound instead.
    let (zero, scaled): (Vec<&FdReport>, Vec<&FdReport>) = reports.iter().partition(|r| r.analytic_zero);
    let worst = scaled.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_zero = zero.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    let compared: usize = reports.iter().map(|r| r.compared).sum();
    let excluded: usize = reports.iter().map(|r| r.excluded).sum();
    Ok(pass(
        "gradients",
        format!("fd/{}", method.name()),
        worst < opts.fd_tolerance && worst_zero < ZERO_GRADIENT_ABS_TOL,
        format!(
            "max rel err {worst:.3e} over {} instances ({compared} params compared, {excluded} excluded at clip bounds; \
             {} zero-gradient instances, max abs err {worst_zero:.1e})",
            opts.fd_instances,
            zero.len()
        ),
    ))
}

/// Absolute FD bound for instances with an exactly zero analytic gradient.
pub const ZERO_GRADIENT_ABS_TOL: f64 = 1e-9;

fn gradients(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    for m in Method::ALL {
        out.push(fd_property(
            m,
            &|p: &TabularPolicy, g: &Group, s: &LossSpec, a: &KlAnchors| compute_loss(p, g, s, a),
            opts,
        )?);
    }
    out.push(real_weight_consistency(opts)?);
    out.push(grpo_audit_consistency(opts)?);
    Ok(out)
}

/// Group of two-token rollouts `[a_k, END]` with distinct `a_k`, so row
/// `(prompt, a_k)` is touched only by rollout `k`'s END token.
fn two_token_group<R: Rng>(rng: &mut R, g: usize, scores: Option<&[f64]>) -> Result<(TabularPolicy, Group)> {
    let v = g as u32 + 2;
    let vocab = Vocab::new(v, v - 1)?;
    let end = v - 1;
    let prompt = Task::ModSum { digits: 1 }.prompt(0)?;
    let mut policy = TabularPolicy::new(1, vocab)?;
    policy.set_row(ContextKey::at(0, 1, &[]), random_row(rng, v as usize, 1.0))?;
    let mut rollouts = Vec::new();
    for k in 0..g {
        let a = k as Token;
        policy.set_row(ContextKey::at(0, 1, &[a]), random_row(rng, v as usize, 1.0))?;
        let tokens = vec![a, end];
        let s = scores.map(|s| s[k]).unwrap_or_else(|| rng.gen_range(-1.5..1.5));
        let old = (0..2)
            .map(|t| Ok(policy.token_logprob(&policy.context(0, &tokens[..t]), tokens[t])? - s))
            .collect::<Result<Vec<f64>>>()?;
        let old = old.into_iter().map(|x| x.min(0.0)).collect();
        rollouts.push(Rollout::new(0, tokens, old, u8::from(k % 2 == 0 || rng.gen_bool(0.3)))?);
    }
    Ok((policy, Group::new(prompt, rollouts)?))
}

/// The closed-form REAL weight equals the weight recovered from finite
/// differences on a row owned by a single rollout.
fn real_weight_consistency(opts: &VerifyOptions) -> Result<PropertyResult> {
    let seeds = SeedStream::new(opts.seed);
    let n = (opts.fd_instances / 4).max(1);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut rng = seeds.rng("verify-consistency", &[i as u64]);
        let (policy, group) = two_token_group(&mut rng, 8, None)?;
        let mut spec = LossSpec::for_method(Method::Real);
        spec.tau = rng.gen_range(0.2..2.0);
        let end = policy.vocab().end();
        let scores: Vec<f64> = group
            .rollouts
            .iter()
            .map(|r| crate::objectives::rollout_score(&policy, r))
            .collect::<Result<_>>()?;
        let rows = (0..group.size()).map(|k| ContextKey::at(0, 1, &[k as Token])).collect();
        let loss = |p: &TabularPolicy, g: &Group, s: &LossSpec, a: &KlAnchors| compute_loss(p, g, s, a);
        let fd = numerical_gradient(&loss, &spec, &policy, &group, &KlAnchors::none(), &rows, opts.fd_step)?;
        for (k, r) in group.rollouts.iter().enumerate() {
            let class = Class::of_reward(r.reward);
            let others: Vec<f64> = group
                .rollouts
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != k && o.reward == r.reward)
                .map(|(j, _)| scores[j])
                .collect();
            let closed = real_rollout_weight(scores[k], class, &others, spec.tau)?;
            let ctx = ContextKey::at(0, 1, &[k as Token]);
            let p_end = policy.probs(&ctx)[end as usize];
            let recovered = fd.get(&ctx, end).abs() * r.len() as f64 / (1.0 - p_end);
            worst = worst.max((recovered - closed).abs() / closed);
        }
    }
    Ok(pass(
        "gradients",
        "real-weight-consistency",
        worst < opts.fd_tolerance,
        format!("max rel diff {worst:.3e} between closed form and FD-recovered weight on {n} groups"),
    ))
}

/// `grpo_token_weight` reproduces every audited token weight of `grpo_loss`.
fn grpo_audit_consistency(opts: &VerifyOptions) -> Result<PropertyResult> {
    let seeds = SeedStream::new(opts.seed);
    let mut mismatches = 0usize;
    let mut tokens = 0usize;
    let mut clipped = 0usize;
    for i in 0..opts.fd_instances {
        let mut rng = seeds.rng("verify-audit", &[i as u64]);
        let inst = random_instance(&mut rng, Method::Grpo)?;
        let adv = group_advantages(&inst.group.rewards())?;
        let out = grpo_loss(&inst.policy, &inst.group, &adv, &inst.spec, &inst.anchors())?;
        for w in &out.token_weights {
            let s = crate::objectives::token_score(&inst.policy, &inst.group.rollouts[w.rollout], w.position)?;
            let expect = grpo_token_weight(s, adv.values[w.rollout], inst.spec.clip);
            tokens += 1;
            clipped += usize::from(expect.clipped);
            if expect.magnitude != w.magnitude || expect.clipped != w.clipped {
                mismatches += 1;
            }
        }
    }
    Ok(pass(
        "gradients",
        "grpo-audit-consistency",
        mismatches == 0 && tokens > 0,
        format!("{mismatches} mismatches over {tokens} tokens ({clipped} clipped)"),
    ))
}

/// Group of single-END rollouts with prescribed scores `s̄`.
pub fn scored_group(scores: &[f64], rewards: &[u8]) -> Result<(TabularPolicy, Group)> {
    if scores.len() != rewards.len() {
        return Err(Error::invalid("scores and rewards differ in length"));
    }
    let task = Task::Parity { bits: 1 };
    let end = task.vocab().end();
    let mut policy = TabularPolicy::new(1, task.vocab())?;
    let ctx = ContextKey::at(0, 1, &[]);
    policy.set_row(ctx.clone(), vec![0.0, 0.0, -100.0])?;
    let current = policy.token_logprob(&ctx, end)?;
    let rollouts = scores
        .iter()
        .zip(rewards)
        .map(|(&s, &r)| Rollout::new(0, vec![end], vec![current - s], r))
        .collect::<Result<Vec<_>>>()?;
    Ok((policy, Group::new(task.prompt(0)?, rollouts)?))
}

fn random_scored<R: Rng>(rng: &mut R, span: f64) -> (Vec<f64>, Vec<u8>) {
    let g = rng.gen_range(2..=16);
    let scores = (0..g).map(|_| rng.gen_range(-span..span)).collect();
    let rewards = (0..g).map(|_| rng.gen_range(0..=1)).collect();
    (scores, rewards)
}

/// Every audited REAL weight stays below `1/τ`.
fn bounds(opts: &VerifyOptions) -> Result<PropertyResult> {
    let seeds = SeedStream::new(opts.seed);
    let chunks = 64usize;
    let per = opts.bound_configs.div_ceil(chunks);
    let results = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seeds.rng("verify-bounds", &[c as u64]);
            let mut worst = f64::NEG_INFINITY;
            let mut weights = 0usize;
            for _ in 0..per.min(opts.bound_configs.saturating_sub(c * per)) {
                let (scores, rewards) = random_scored(&mut rng, 40.0);
                let mut spec = LossSpec::for_method(Method::Real);
                spec.tau = rng.gen_range(0.05..5.0);
                let (policy, group) = scored_group(&scores, &rewards)?;
                let out = real_loss(&policy, &group, &spec, &KlAnchors::none())?;
                for w in &out.rollout_weights {
                    worst = worst.max(w.magnitude - 1.0 / spec.tau);
                    weights += 1;
                }
            }
            Ok((worst, weights))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let weights: usize = results.iter().map(|r| r.1).sum();
    Ok(pass(
        "bounds",
        "real-below-inverse-tau",
        worst < 1e-9,
        format!(
            "max |W| - 1/tau = {worst:.3e} over {} configurations ({weights} weights)",
            opts.bound_configs
        ),
    ))
}

fn bce_bounds(opts: &VerifyOptions) -> Result<PropertyResult> {
    let seeds = SeedStream::new(opts.seed);
    let mut rng = seeds.rng("verify-bce-bounds", &[]);
    let mut worst = f64::NEG_INFINITY;
    let n = (opts.bound_configs / 10).max(1);
    for _ in 0..n {
        let (scores, rewards) = random_scored(&mut rng, 40.0);
        let mut spec = LossSpec::for_method(Method::RealBce);
        spec.tau = rng.gen_range(0.05..5.0);
        let (policy, group) = scored_group(&scores, &rewards)?;
        let out = compute_loss(&policy, &group, &spec, &KlAnchors::none())?;
        for w in &out.rollout_weights {
            worst = worst.max(w.magnitude - 1.0 / spec.tau);
        }
    }
    Ok(pass(
        "bounds",
        "bce-at-most-inverse-tau",
        worst <= 0.0,
        format!("max |W| - 1/tau = {worst:.3e} over {n} configurations"),
    ))
}

/// At τ = 0.5 the weight approaches 2 within 1% once `s̄` reaches ∓6 and
/// never reaches it.
fn supremum() -> Result<PropertyResult> {
    let tau = 0.5;
    let mut lowest = f64::INFINITY;
    let mut highest = 0.0f64;
    for c in [1.0, 4.0, 16.0] {
        for (class, s) in [(Class::Positive, -6.0), (Class::Negative, 6.0)] {
            let w = real_weight(s, class, c, tau);
            lowest = lowest.min(w);
            highest = highest.max(w);
        }
    }
    let (policy, group) = scored_group(&[-6.0, 6.0], &[1, 0])?;
    let out = real_loss(&policy, &group, &LossSpec::for_method(Method::Real), &KlAnchors::none())?;
    for w in &out.rollout_weights {
        lowest = lowest.min(w.magnitude);
        highest = highest.max(w.magnitude);
    }
    Ok(pass(
        "bounds",
        "supremum-approached",
        lowest >= 0.99 * 2.0 && highest < 2.0,
        format!("weights at s = -/+6 lie in [{lowest}, {highest}]"),
    ))
}

fn monotonicity(opts: &VerifyOptions) -> PropertyResult {
    let mut rng = SeedStream::new(opts.seed).rng("verify-monotonicity", &[]);
    let mut violations = 0usize;
    for _ in 0..opts.monotonic_triples {
        let s = rng.gen_range(-5.0..5.0);
        let delta = rng.gen_range(1e-3..1.0);
        let c = rng.gen_range(1.0..100.0);
        let tau = rng.gen_range(0.25..2.0);
        let (p0, p1) = (
            real_weight(s, Class::Positive, c, tau),
            real_weight(s + delta, Class::Positive, c, tau),
        );
        let (n0, n1) = (
            real_weight(s, Class::Negative, c, tau),
            real_weight(s + delta, Class::Negative, c, tau),
        );
        violations += usize::from(!(p1 < p0)) + usize::from(!(n1 > n0));
    }
    pass(
        "monotonicity",
        "real-strictly-monotone",
        violations == 0,
        format!("{violations} violations over {} triples", opts.monotonic_triples),
    )
}

fn growth(opts: &VerifyOptions) -> PropertyResult {
    let mut rng = SeedStream::new(opts.seed).rng("verify-growth", &[]);
    let clip = ClipRange::symmetric(0.2);
    let mut worst = 0.0f64;
    for _ in 0..opts.growth_pairs {
        let positive = rng.gen_bool(0.5);
        let a: f64 = rng.gen_range(0.1..3.0);
        // both points stay inside the unclipped region for the sign of A
        let (lo, hi) = if positive {
            (-5.0, clip.upper().ln())
        } else {
            (clip.lower().ln(), 5.0)
        };
        let s = rng.gen_range(lo..hi);
        let delta = rng.gen_range(lo - s..hi - s);
        let adv = if positive { a } else { -a };
        let w0 = grpo_token_weight(s, adv, clip);
        let w1 = grpo_token_weight(s + delta, adv, clip);
        if w0.clipped || w1.clipped {
            worst = f64::INFINITY;
            continue;
        }
        worst = worst.max((w1.magnitude / w0.magnitude - delta.exp()).abs() / delta.exp());
    }
    pass(
        "growth",
        "grpo-exponential",
        worst < 1e-9,
        format!(
            "max rel deviation from e^delta {worst:.3e} over {} pairs",
            opts.growth_pairs
        ),
    )
}

/// Rows owned by clipped tokens receive exactly zero gradient.
fn clipped_tokens_are_zero() -> Result<PropertyResult> {
    let g = 8;
    let mut rng = SeedStream::new(0).rng("verify-clipped", &[]);
    // positives pushed above 1+ε, negatives below 1-ε: all clipped
    let scores: Vec<f64> = (0..g).map(|k| if k % 2 == 0 { 0.5 } else { -0.5 }).collect();
    let (policy, group) = two_token_group(&mut rng, g, Some(&scores))?;
    let mut ok = true;
    let mut checked = 0;
    for method in [Method::Grpo, Method::Dapo] {
        let spec = LossSpec {
            beta: 0.0,
            kl_mode: KlMode::None,
            ..LossSpec::for_method(method)
        };
        let out = compute_loss(&policy, &group, &spec, &KlAnchors::none())?;
        for (k, r) in group.rollouts.iter().enumerate() {
            let fully_clipped = out
                .token_weights
                .iter()
                .filter(|w| w.rollout == k)
                .all(|w| w.clipped && w.magnitude == 0.0);
            let row = out.grad.row(&ContextKey::at(0, 1, &[k as Token]));
            let zero = row.is_none_or(|row| row.iter().all(|&x| x == 0.0));
            let should_clip = (r.reward == 1) == (scores[k] > 0.0);
            if should_clip {
                checked += 1;
                ok &= fully_clipped && zero;
            }
        }
    }
    Ok(pass(
        "growth",
        "clipped-zero-gradient",
        ok && checked > 0,
        format!("{checked} clipped rollouts checked for exactly zero row gradients"),
    ))
}

/// Factored unified CE against the explicit pairwise double sum.
fn pairwise_identity(opts: &VerifyOptions) -> PropertyResult {
    let mut rng = SeedStream::new(opts.seed).rng("verify-pairwise", &[]);
    let mut worst = 0.0f64;
    for _ in 0..opts.identity_sets {
        let zp: Vec<f64> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let zn: Vec<f64> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut pairs = 0.0;
        for p in &zp {
            for n in &zn {
                pairs += (n - p).exp();
            }
        }
        worst = worst.max((unified_ce(&zp, &zn) - (1.0 + pairs).ln()).abs());
    }
    pass(
        "identities",
        "unified-ce-pairwise",
        worst < 1e-9,
        format!("max abs diff {worst:.3e} over {} logit sets", opts.identity_sets),
    )
}

/// REAL loss equals `L+ + L−` evaluated independently.
fn decomposition(opts: &VerifyOptions) -> Result<PropertyResult> {
    let mut rng = SeedStream::new(opts.seed).rng("verify-decomposition", &[]);
    let mut worst = 0.0f64;
    for _ in 0..opts.identity_sets {
        let (scores, rewards) = random_scored(&mut rng, 3.0);
        let tau = rng.gen_range(0.2..2.0);
        let spec = LossSpec {
            tau,
            ..LossSpec::for_method(Method::Real)
        };
        let (policy, group) = scored_group(&scores, &rewards)?;
        let out = real_loss(&policy, &group, &spec, &KlAnchors::none())?;
        let actual: Vec<f64> = group
            .rollouts
            .iter()
            .map(|r| crate::objectives::rollout_score(&policy, r))
            .collect::<Result<_>>()?;
        let mut l_pos = 1.0;
        let mut l_neg = 1.0;
        for (s, r) in actual.iter().zip(&rewards) {
            if *r == 1 {
                l_pos += (-s / tau).exp();
            } else {
                l_neg += (s / tau).exp();
            }
        }
        worst = worst.max((out.loss - (l_pos.ln() + l_neg.ln())).abs());
    }
    Ok(pass(
        "identities",
        "real-decomposition",
        worst < 1e-12,
        format!("max abs diff {worst:.3e} over {} groups", opts.identity_sets),
    ))
}

/// Synthetic log with tokens in every ratio bin for both classes.
pub fn synthetic_log(clip: ClipRange) -> Result<(TabularPolicy, Vec<RolloutRecord>)> {
    let task = Task::Parity { bits: 2 };
    let vocab = task.vocab();
    let policy = TabularPolicy::new(2, vocab)?;
    let shifts = [
        (clip.lower() * 0.5).ln(),
        (clip.lower() * 0.99).ln(),
        clip.lower().ln(),
        (0.97f64).ln(),
        0.0,
        (1.0 + clip.high * 0.5).ln(),
        clip.upper().ln(),
        (clip.upper() * 1.3).ln(),
        (clip.upper() * 2.0).ln(),
    ];
    let mut records = Vec::new();
    for (i, window) in shifts.chunks(3).enumerate() {
        for reward in [0u8, 1] {
            let len = window.len();
            let tokens: Vec<Token> = (0..len).map(|t| if t + 1 == len { vocab.end() } else { 0 }).collect();
            let old = (0..len)
                .map(|t| Ok(policy.token_logprob(&policy.context(i as u32, &tokens[..t]), tokens[t])? - window[t]))
                .collect::<Result<Vec<f64>>>()?;
            let rollout = Rollout::new(i as u32, tokens, old, reward)?;
            records.push(RolloutRecord::from_rollout(0, &rollout));
        }
    }
    Ok((policy, records))
}

fn bin_structure() -> Result<PropertyResult> {
    let clip = ClipRange::symmetric(0.2);
    let (policy, records) = synthetic_log(clip)?;
    let report = ratio_bin_stats(&records, &policy, clip)?;
    let mut ok = true;
    let mut worst = 0.0f64;
    for (class_bins, class) in [
        (&report.positives, Class::Positive),
        (&report.negatives, Class::Negative),
    ] {
        let total: f64 = class_bins.bins.iter().map(|b| b.percent).sum();
        ok &= (total - 100.0).abs() < 0.01;
        for b in &class_bins.bins {
            ok &= b.clipped == b.bin.is_clipped_for(class);
            ok &= b.clipped == (b.avg_magnitude.is_none() && b.tokens > 0) || b.tokens == 0;
            // independent recount of the mean ratio in the bin
            let mut sum = 0.0;
            let mut n = 0usize;
            for rec in records.iter().filter(|r| Class::of_reward(r.reward) == class) {
                for t in 0..rec.tokens.len() {
                    let ctx = policy.context(rec.prompt, &rec.tokens[..t]);
                    let ratio = (policy.token_logprob(&ctx, rec.tokens[t])? - rec.old_logprobs[t]).exp();
                    if RatioBin::of(ratio, clip) == b.bin {
                        sum += ratio;
                        n += 1;
                    }
                }
            }
            ok &= n == b.tokens;
            if let Some(avg) = b.avg_magnitude {
                worst = worst.max((avg - sum / n as f64).abs());
            }
        }
    }
    let markers = report.positives.bins[3].clipped
        && report.negatives.bins[0].clipped
        && report.positives.bins.iter().filter(|b| b.clipped).count() == 1
        && report.negatives.bins.iter().filter(|b| b.clipped).count() == 1;
    Ok(pass(
        "bins",
        "zero-markers-and-ratio-identity",
        ok && markers && worst < 1e-9,
        format!("markers at positive >1+eps and negative <1-eps: {markers}; max |avg W - avg ratio| {worst:.3e}"),
    ))
}

/// Reference parameters of the weight-curve figure: ε = 0.2, A = ±1,
/// τ = 0.5, C = 4.
pub fn figure_curves(n_points: usize) -> Result<Vec<crate::gradan::WeightCurve>> {
    let clip = ClipRange::symmetric(0.2);
    Ok(vec![
        weight_curve(CurveMethod::Grpo { advantage: 1.0, clip }, -1.0, 1.0, n_points)?,
        weight_curve(CurveMethod::Grpo { advantage: -1.0, clip }, -1.0, 1.0, n_points)?,
        weight_curve(
            CurveMethod::Real {
                class: Class::Positive,
                c: 4.0,
                tau: 0.5,
            },
            -3.0,
            3.0,
            n_points,
        )?,
        weight_curve(
            CurveMethod::Real {
                class: Class::Negative,
                c: 4.0,
                tau: 0.5,
            },
            -3.0,
            3.0,
            n_points,
        )?,
    ])
}

/// Independent closed form for the figure curves.
pub fn figure_reference(method: &CurveMethod, s: f64) -> f64 {
    match *method {
        CurveMethod::Grpo { advantage, clip } => {
            let r = s.exp();
            let cut = if advantage > 0.0 {
                r > 1.0 + clip.high
            } else {
                r < 1.0 - clip.low
            };
            if cut {
                0.0
            } else {
                advantage.abs() * r
            }
        }
        CurveMethod::Real { class, c, tau } => {
            let sign = if class == Class::Positive { 1.0 } else { -1.0 };
            1.0 / (tau * (1.0 + c * (sign * s / tau).exp()))
        }
    }
}

fn curves() -> Result<PropertyResult> {
    let curves = figure_curves(241)?;
    let mut worst = 0.0f64;
    let mut real_max = 0.0f64;
    for c in &curves {
        for &(s, w) in &c.samples {
            worst = worst.max((w - figure_reference(&c.method, s)).abs());
            if matches!(c.method, CurveMethod::Real { .. }) {
                real_max = real_max.max(w);
            }
        }
    }
    let at_zero = real_weight(0.0, Class::Positive, 4.0, 0.5);
    Ok(pass(
        "curves",
        "closed-forms",
        worst < 1e-12 && at_zero == 0.4 && real_max <= 2.0,
        format!("max abs diff {worst:.3e}; REAL at s=0 is {at_zero}; REAL max {real_max}"),
    ))
}

/// All-same-reward groups: advantage methods yield exactly zero gradient,
/// REAL's anchor keeps a nonzero one.
fn degenerate_contrast(opts: &VerifyOptions) -> Result<PropertyResult> {
    let seeds = SeedStream::new(opts.seed);
    let mut failures = 0usize;
    for i in 0..opts.degenerate_groups {
        let mut rng = seeds.rng("verify-degenerate", &[i as u64]);
        let mut inst = random_instance(&mut rng, Method::Real)?;
        let reward = (i % 2) as u8;
        for r in &mut inst.group.rollouts {
            r.reward = reward;
        }
        let anchors = inst.anchors();
        for m in [Method::Grpo, Method::Dapo, Method::Gspo] {
            let out = compute_loss(&inst.policy, &inst.group, &LossSpec::for_method(m), &anchors)?;
            failures += usize::from(!(out.degenerate && out.grad.is_zero()));
        }
        let real = compute_loss(&inst.policy, &inst.group, &LossSpec::for_method(Method::Real), &anchors)?;
        failures += usize::from(!(real.grad.max_abs() > 0.0 && !real.degenerate));
    }
    Ok(pass(
        "degenerate",
        "advantage-zero-real-nonzero",
        failures == 0,
        format!(
            "{failures} failures over {} all-same-reward groups",
            opts.degenerate_groups
        ),
    ))
}

/// Loss output with the gradient sign flipped; the mutation fixture the
/// finite-difference property must reject.
pub fn sign_flipped_real(
    policy: &TabularPolicy,
    group: &Group,
    spec: &LossSpec,
    anchors: &KlAnchors,
) -> Result<LossOutput> {
    let mut out = real_loss(policy, group, spec, anchors)?;
    out.grad.scale(-1.0);
    Ok(out)
}
