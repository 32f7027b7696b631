//! Group-based policy objectives and their exact parameter gradients.
//!
//! Every method is exposed as a loss to be minimised. The clipped-surrogate
//! family (GRPO, DAPO, GSPO) weights each token's score-function gradient by
//! its advantage and importance ratio; the reward-as-label family (REAL,
//! vanilla REAL, BCE) treats each rollout's length-normalised relative
//! log-probability `s̄` as a classification logit, with binary rewards as
//! labels.
//!
//! All losses are evaluated per [`Group`]. Gradients are assembled from
//! [`TabularPolicy::logprob_grad`](crate::policy::TabularPolicy::logprob_grad)
//! terms in canonical order (rollout index, then token index), so results are
//! bit-reproducible.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, logistic, softmax, softplus};
use crate::policy::{exact_kl, ContextKey, GradientVector, Policy, PolicySnapshot};
use crate::rollout::{partition, Group, Rollout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grpo,
    Dapo,
    Gspo,
    Real,
    RealVanilla,
    RealBce,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Grpo,
        Method::Dapo,
        Method::Gspo,
        Method::Real,
        Method::RealVanilla,
        Method::RealBce,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Dapo => "dapo",
            Method::Gspo => "gspo",
            Method::Real => "real",
            Method::RealVanilla => "real_vanilla",
            Method::RealBce => "real_bce",
        }
    }

    /// Methods whose gradient is driven by group-normalised advantages.
    pub fn uses_advantages(&self) -> bool {
        matches!(self, Method::Grpo | Method::Dapo | Method::Gspo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Which policy the KL penalty is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KlMode {
    None,
    Reference,
    Old,
}

impl KlMode {
    pub fn name(&self) -> &'static str {
        match self {
            KlMode::None => "none",
            KlMode::Reference => "reference",
            KlMode::Old => "old",
        }
    }
}

impl FromStr for KlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KlMode::None),
            "reference" | "ref" => Ok(KlMode::Reference),
            "old" => Ok(KlMode::Old),
            _ => Err(Error::invalid(format!("unknown kl mode {s:?}"))),
        }
    }
}

/// How per-token surrogate terms are averaged within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    /// Mean over each rollout's tokens, then mean over rollouts.
    RolloutMean,
    /// Sum over all tokens in the group divided by the total token count.
    TokenMean,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::RolloutMean => "rollout_mean",
            Aggregation::TokenMean => "token_mean",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rollout_mean" => Ok(Aggregation::RolloutMean),
            "token_mean" => Ok(Aggregation::TokenMean),
            _ => Err(Error::invalid(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// Importance-ratio clip range `[1 - low, 1 + high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange {
    pub low: f64,
    pub high: f64,
}

impl ClipRange {
    pub fn symmetric(eps: f64) -> Self {
        Self { low: eps, high: eps }
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.high
    }

    /// Whether the min/clip surrogate selects its constant branch. Ratios
    /// exactly on a bound count as unclipped.
    pub fn is_clipped(&self, ratio: f64, advantage: f64) -> bool {
        (advantage > 0.0 && ratio > self.upper()) || (advantage < 0.0 && ratio < self.lower())
    }

    fn clamp(&self, ratio: f64) -> f64 {
        ratio.clamp(self.lower(), self.upper())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub method: Method,
    pub tau: f64,
    pub clip: ClipRange,
    pub beta: f64,
    pub kl_mode: KlMode,
    pub aggregation: Aggregation,
}

impl LossSpec {
    /// Hyperparameter defaults for each method (GRPO: ε = 0.2, β = 0.001 vs
    /// the reference policy; DAPO: ε = 0.2/0.28 with token-mean; GSPO:
    /// ε = 3e-4/4e-4; REAL family: τ = 0.5, no KL).
    pub fn for_method(method: Method) -> Self {
        let base = LossSpec {
            method,
            tau: 0.5,
            clip: ClipRange::symmetric(0.2),
            beta: 0.0,
            kl_mode: KlMode::None,
            aggregation: Aggregation::RolloutMean,
        };
        match method {
            Method::Grpo => LossSpec {
                beta: 0.001,
                kl_mode: KlMode::Reference,
                ..base
            },
            Method::Dapo => LossSpec {
                clip: ClipRange { low: 0.2, high: 0.28 },
                aggregation: Aggregation::TokenMean,
                ..base
            },
            Method::Gspo => LossSpec {
                clip: ClipRange { low: 3e-4, high: 4e-4 },
                ..base
            },
            Method::Real | Method::RealVanilla | Method::RealBce => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.clip.low > 0.0 && self.clip.high > 0.0) {
            return Err(Error::invalid("clip bounds must be positive"));
        }
        if self.clip.low >= 1.0 {
            return Err(Error::invalid("eps_low must be below 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Snapshots a KL penalty may be measured against.
#[derive(Debug, Clone, Copy, Default)]
pub struct KlAnchors<'a> {
    pub reference: Option<&'a PolicySnapshot>,
    pub old: Option<&'a PolicySnapshot>,
}

impl<'a> KlAnchors<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    fn select(&self, mode: KlMode) -> Result<Option<&'a PolicySnapshot>> {
        match mode {
            KlMode::None => Ok(None),
            KlMode::Reference => self
                .reference
                .map(Some)
                .ok_or_else(|| Error::invalid("kl_mode=reference but no reference policy given")),
            KlMode::Old => self
                .old
                .map(Some)
                .ok_or_else(|| Error::invalid("kl_mode=old but no old policy given")),
        }
    }
}

/// Audited weight of one token in a clipped-surrogate loss: `|W| = |A·ρ|`
/// when unclipped, `0` when clipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenWeight {
    pub rollout: usize,
    pub position: usize,
    pub ratio: f64,
    pub advantage: f64,
    pub magnitude: f64,
    pub clipped: bool,
}

/// Audited weight of one rollout: `|∂L/∂s̄|` for the reward-as-label family,
/// `|A·σ|` (zero when clipped) for GSPO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutWeight {
    pub rollout: usize,
    pub positive: bool,
    pub score: f64,
    pub magnitude: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: GradientVector,
    pub token_weights: Vec<TokenWeight>,
    pub rollout_weights: Vec<RolloutWeight>,
    /// KL part of `loss` (already multiplied by β).
    pub kl: f64,
    /// Set when the group carried no learning signal for the method and the
    /// output is identically zero.
    pub degenerate: bool,
}

impl LossOutput {
    fn degenerate() -> Self {
        LossOutput {
            degenerate: true,
            ..LossOutput::default()
        }
    }
}

/// Group-normalised advantages `(r - mean) / std` (population std).
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    /// All rewards equal; `values` are all zero and must not be used.
    pub degenerate: bool,
}

pub fn group_advantages(rewards: &[u8]) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "advantages need at least 2 rollouts, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(AdvantageSet {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    let std = var.sqrt();
    Ok(AdvantageSet {
        values: rewards.iter().map(|&r| (r as f64 - mean) / std).collect(),
        degenerate: false,
    })
}

/// Current-policy view of one rollout.
struct ScoredRollout {
    contexts: Vec<ContextKey>,
    token_scores: Vec<f64>,
    score: f64,
}

fn score(policy: &impl Policy, rollout: &Rollout) -> Result<ScoredRollout> {
    let mut contexts = Vec::with_capacity(rollout.len());
    let mut token_scores = Vec::with_capacity(rollout.len());
    for (t, (&tok, &old)) in rollout.tokens.iter().zip(&rollout.old_logprobs).enumerate() {
        let ctx = policy.context(rollout.prompt_id, &rollout.tokens[..t]);
        token_scores.push(policy.token_logprob(&ctx, tok)? - old);
        contexts.push(ctx);
    }
    let score = token_scores.iter().sum::<f64>() / rollout.len() as f64;
    Ok(ScoredRollout {
        contexts,
        token_scores,
        score,
    })
}

/// Relative log-probability `s_t = log π_θ(o_t|·) − log π_old(o_t|·)`.
pub fn token_score(policy: &impl Policy, rollout: &Rollout, t: usize) -> Result<f64> {
    if t >= rollout.len() {
        return Err(Error::invalid(format!(
            "token index {t} out of range for rollout of length {}",
            rollout.len()
        )));
    }
    let ctx = policy.context(rollout.prompt_id, &rollout.tokens[..t]);
    Ok(policy.token_logprob(&ctx, rollout.tokens[t])? - rollout.old_logprobs[t])
}

/// Length-normalised relative log-probability `s̄ = (1/|o|) Σ_t s_t`.
pub fn rollout_score(policy: &impl Policy, rollout: &Rollout) -> Result<f64> {
    Ok(score(policy, rollout)?.score)
}

/// Rollout scores split by label; the anchor logit is the constant 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub positives: Vec<(usize, f64)>,
    pub negatives: Vec<(usize, f64)>,
}

impl ScoreSet {
    pub const ANCHOR: f64 = 0.0;

    pub fn from_group(policy: &impl Policy, group: &Group) -> Result<Self> {
        let part = partition(group);
        let collect = |idx: &[usize]| {
            idx.iter()
                .map(|&i| Ok((i, rollout_score(policy, &group.rollouts[i])?)))
                .collect::<Result<Vec<_>>>()
        };
        Ok(ScoreSet {
            positives: collect(&part.positives)?,
            negatives: collect(&part.negatives)?,
        })
    }
}

/// Unified softmax cross-entropy `log(1 + Σ_j e^{z_n^j} Σ_i e^{−z_p^i})`,
/// evaluated as `softplus(lse(Z_n) + lse(−Z_p))`. Empty sums vanish.
pub fn unified_ce(positives: &[f64], negatives: &[f64]) -> f64 {
    let log_pairs = log_sum_exp(negatives.iter().copied()) + log_sum_exp(positives.iter().map(|z| -z));
    if log_pairs.is_nan() {
        // +inf + -inf: one side empty, the other overflowing
        return 0.0;
    }
    softplus(log_pairs)
}

/// Adds `Σ_t scale_t ∇ log π(o_t)` for one rollout.
fn add_rollout_grad(
    grad: &mut GradientVector,
    policy: &impl Policy,
    rollout: &Rollout,
    scored: &ScoredRollout,
    token_scale: impl Fn(usize) -> f64,
) {
    for (t, ctx) in scored.contexts.iter().enumerate() {
        let scale = token_scale(t);
        if scale != 0.0 {
            grad.add_logprob_grad(ctx, &policy.probs(ctx), rollout.tokens[t], scale);
        }
    }
}

fn check_group(group: &Group) -> Result<()> {
    if group.size() < 2 {
        return Err(Error::invalid(format!(
            "objectives need a group of at least 2 rollouts, got {}",
            group.size()
        )));
    }
    Ok(())
}

fn check_method(spec: &LossSpec, allowed: &[Method], op: &str) -> Result<()> {
    spec.validate()?;
    if !allowed.contains(&spec.method) {
        return Err(Error::invalid(format!("{op} called with method {}", spec.method)));
    }
    Ok(())
}

fn add_kl(
    out: &mut LossOutput,
    policy: &impl Policy,
    group: &Group,
    spec: &LossSpec,
    anchors: &KlAnchors,
) -> Result<()> {
    if let Some(anchor) = anchors.select(spec.kl_mode)? {
        let (kl, grad) = kl_penalty(policy, anchor, group, spec.beta)?;
        out.loss += kl;
        out.kl = kl;
        out.grad.add_scaled(&grad, 1.0);
    }
    Ok(())
}

/// `β` times the mean exact KL over every token position visited by the
/// group, with its exact gradient
/// `∂KL/∂z_j = p_j (log p_j − log q_j − KL)`.
pub fn kl_penalty(
    policy: &impl Policy,
    anchor: &PolicySnapshot,
    group: &Group,
    beta: f64,
) -> Result<(f64, GradientVector)> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let mut grad = GradientVector::new();
    if beta == 0.0 {
        return Ok((0.0, grad));
    }
    let scale = beta / group.token_count() as f64;
    let mut total = 0.0;
    for r in &group.rollouts {
        for t in 0..r.len() {
            let ctx = policy.context(r.prompt_id, &r.tokens[..t]);
            let kl = exact_kl(policy, anchor, &ctx)?;
            total += kl;
            let lp = policy.log_probs(&ctx);
            let lq = anchor.log_probs(&ctx);
            let row = grad.row_mut(&ctx, lp.len());
            for ((g, &a), &b) in row.iter_mut().zip(&lp).zip(&lq) {
                *g += scale * a.exp() * (a - b - kl);
            }
        }
    }
    Ok((scale * total, grad))
}

/// GRPO: per-token clipped surrogate with group-normalised advantages,
/// averaged per rollout then over the group, plus the configured KL penalty.
pub fn grpo_loss(
    policy: &impl Policy,
    group: &Group,
    adv: &AdvantageSet,
    spec: &LossSpec,
    anchors: &KlAnchors,
) -> Result<LossOutput> {
    check_method(spec, &[Method::Grpo], "grpo_loss")?;
    clipped_token_surrogate(policy, group, adv, spec, anchors)
}

/// DAPO: asymmetric clip range and token-mean aggregation.
pub fn dapo_loss(
    policy: &impl Policy,
    group: &Group,
    adv: &AdvantageSet,
    spec: &LossSpec,
    anchors: &KlAnchors,
) -> Result<LossOutput> {
    check_method(spec, &[Method::Dapo], "dapo_loss")?;
    clipped_token_surrogate(policy, group, adv, spec, anchors)
}

fn clipped_token_surrogate(
    policy: &impl Policy,
    group: &Group,
    adv: &AdvantageSet,
    spec: &LossSpec,
    anchors: &KlAnchors,
) -> Result<LossOutput> {
    check_group(group)?;
    if adv.values.len() != group.size() {
        return Err(Error::invalid("advantage set does not match the group"));
    }
    if adv.degenerate {
        return Ok(LossOutput::degenerate());
    }
    let total_tokens = group.token_count() as f64;
    let g = group.size() as f64;
    let mut out = LossOutput::default();
    let mut objective = 0.0;
    for (k, rollout) in group.rollouts.iter().enumerate() {
        let scored = score(policy, rollout)?;
        let a = adv.values[k];
        let norm = match spec.aggregation {
            Aggregation::RolloutMean => 1.0 / (g * rollout.len() as f64),
            Aggregation::TokenMean => 1.0 / total_tokens,
        };
        let mut scales = Vec::with_capacity(rollout.len());
        for (t, &s) in scored.token_scores.iter().enumerate() {
            let ratio = s.exp();
            let clipped = spec.clip.is_clipped(ratio, a);
            objective += norm * (ratio * a).min(spec.clip.clamp(ratio) * a);
            let weight = if clipped { 0.0 } else { a * ratio };
            scales.push(-norm * weight);
            out.token_weights.push(TokenWeight {
                rollout: k,
                position: t,
                ratio,
                advantage: a,
                magnitude: weight.abs(),
                clipped,
            });
        }
        add_rollout_grad(&mut out.grad, policy, rollout, &scored, |t| scales[t]);
    }
    out.loss = -objective;
    add_kl(&mut out, policy, group, spec, anchors)?;
    Ok(out)
}

/// GSPO: the sequence ratio `σ = exp(s̄)` replaces per-token ratios and is
/// clipped at sequence level.
pub fn gspo_loss(
    policy: &impl Policy,
    group: &Group,
    adv: &AdvantageSet,
    spec: &LossSpec,
    anchors: &KlAnchors,
) -> Result<LossOutput> {
    check_method(spec, &[Method::Gspo], "gspo_loss")?;
    check_group(group)?;
    if adv.values.len() != group.size() {
        return Err(Error::invalid("advantage set does not match the group"));
    }
    if adv.degenerate {
        return Ok(LossOutput::degenerate());
    }
    let g = group.size() as f64;
    let mut out = LossOutput::default();
    let mut objective = 0.0;
    for (k, rollout) in group.rollouts.iter().enumerate() {
        let scored = score(policy, rollout)?;
        let a = adv.values[k];
        let sigma = scored.score.exp();
        let clipped = spec.clip.is_clipped(sigma, a);
        objective += (sigma * a).min(spec.clip.clamp(sigma) * a) / g;
        let weight = if clipped { 0.0 } else { a * sigma };
        let scale = -weight / (g * rollout.len() as f64);
        add_rollout_grad(&mut out.grad, policy, rollout, &scored, |_| scale);
        out.rollout_weights.push(RolloutWeight {
            rollout: k,
            positive: rollout.is_positive(),
            score: scored.score,
            magnitude: weight.abs(),
            clipped,
        });
    }
    out.loss = -objective;
    add_kl(&mut out, policy, group, spec, anchors)?;
    Ok(out)
}

/// Scores of every rollout plus per-rollout `∂L/∂s̄` for a classification
/// loss; shared tail of the reward-as-label family.
fn classification_output(
    policy: &impl Policy,
    group: &Group,
    scored: &[ScoredRollout],
    loss: f64,
    dloss_dscore: &[f64],
) -> LossOutput {
    let mut out = LossOutput {
        loss,
        ..LossOutput::default()
    };
    for (k, rollout) in group.rollouts.iter().enumerate() {
        let w = dloss_dscore[k];
        let scale = w / rollout.len() as f64;
        add_rollout_grad(&mut out.grad, policy, rollout, &scored[k], |_| scale);
        out.rollout_weights.push(RolloutWeight {
            rollout: k,
            positive: rollout.is_positive(),
            score: scored[k].score,
            magnitude: w.abs(),
            clipped: false,
        });
    }
    out
}

fn score_group(policy: &impl Policy, group: &Group) -> Result<Vec<ScoredRollout>> {
    group.rollouts.iter().map(|r| score(policy, r)).collect()
}

/// REAL with the anchor logit at 0:
/// `log(1 + Σ_{O+} e^{−s̄/τ}) + log(1 + Σ_{O−} e^{s̄/τ})`.
///
/// The gradient weight of rollout `k` is `(1/τ)·softmax_k` over its class's
/// logits together with the anchor, i.e. `(1/τ) / (1 + C e^{±s̄_k/τ})`;
/// positives receive it with a negative sign (descent raises `s̄`).
pub fn real_loss(policy: &impl Policy, group: &Group, spec: &LossSpec, anchors: &KlAnchors) -> Result<LossOutput> {
    check_method(spec, &[Method::Real], "real_loss")?;
    check_group(group)?;
    let tau = spec.tau;
    let scored = score_group(policy, group)?;
    let part = partition(group);
    let mut dloss = vec![0.0; group.size()];
    let mut loss = 0.0;
    for (members, sign) in [(&part.positives, -1.0), (&part.negatives, 1.0)] {
        if members.is_empty() {
            continue;
        }
        // logits of this class with the anchor prepended
        let mut logits = vec![0.0];
        logits.extend(members.iter().map(|&k| sign * scored[k].score / tau));
        loss += softplus(log_sum_exp(logits[1..].iter().copied()));
        let weights = softmax(&logits);
        for (&k, w) in members.iter().zip(&weights[1..]) {
            dloss[k] = sign * w / tau;
        }
    }
    let mut out = classification_output(policy, group, &scored, loss, &dloss);
    add_kl(&mut out, policy, group, spec, anchors)?;
    Ok(out)
}

/// REAL without the anchor: `unified_ce(S+/τ, S−/τ)`. Zero, with the
/// degenerate flag, when either class is empty.
pub fn vanilla_real_loss(
    policy: &impl Policy,
    group: &Group,
    spec: &LossSpec,
    anchors: &KlAnchors,
) -> Result<LossOutput> {
    check_method(spec, &[Method::RealVanilla], "vanilla_real_loss")?;
    check_group(group)?;
    let part = partition(group);
    if part.positives.is_empty() || part.negatives.is_empty() {
        return Ok(LossOutput::degenerate());
    }
    let tau = spec.tau;
    let scored = score_group(policy, group)?;
    let zp: Vec<f64> = part.positives.iter().map(|&k| scored[k].score / tau).collect();
    let zn: Vec<f64> = part.negatives.iter().map(|&k| scored[k].score / tau).collect();
    let neg_zp: Vec<f64> = zp.iter().map(|z| -z).collect();
    let log_pairs = log_sum_exp(zn.iter().copied()) + log_sum_exp(neg_zp.iter().copied());
    let loss = softplus(log_pairs);
    // dL/dz_p,k = -σ(log T) softmax(-Z_p)_k ; dL/dz_n,j = σ(log T) softmax(Z_n)_j
    let outer = logistic(log_pairs);
    let mut dloss = vec![0.0; group.size()];
    for (&k, w) in part.positives.iter().zip(softmax(&neg_zp)) {
        dloss[k] = -outer * w / tau;
    }
    for (&k, w) in part.negatives.iter().zip(softmax(&zn)) {
        dloss[k] = outer * w / tau;
    }
    let mut out = classification_output(policy, group, &scored, loss, &dloss);
    add_kl(&mut out, policy, group, spec, anchors)?;
    Ok(out)
}

/// Binary cross-entropy on `σ(s̄/τ)` with rewards as labels.
pub fn bce_loss(policy: &impl Policy, group: &Group, spec: &LossSpec, anchors: &KlAnchors) -> Result<LossOutput> {
    check_method(spec, &[Method::RealBce], "bce_loss")?;
    check_group(group)?;
    let tau = spec.tau;
    let scored = score_group(policy, group)?;
    let mut loss = 0.0;
    let mut dloss = vec![0.0; group.size()];
    for (k, rollout) in group.rollouts.iter().enumerate() {
        let z = scored[k].score / tau;
        if rollout.is_positive() {
            loss += softplus(-z);
            dloss[k] = -logistic(-z) / tau;
        } else {
            loss += softplus(z);
            dloss[k] = logistic(z) / tau;
        }
    }
    let mut out = classification_output(policy, group, &scored, loss, &dloss);
    add_kl(&mut out, policy, group, spec, anchors)?;
    Ok(out)
}

/// Dispatch on `spec.method`. Advantage-based methods skip degenerate groups.
pub fn compute_loss(policy: &impl Policy, group: &Group, spec: &LossSpec, anchors: &KlAnchors) -> Result<LossOutput> {
    match spec.method {
        Method::Grpo | Method::Dapo | Method::Gspo => {
            let adv = group_advantages(&group.rewards())?;
            match spec.method {
                Method::Grpo => grpo_loss(policy, group, &adv, spec, anchors),
                Method::Dapo => dapo_loss(policy, group, &adv, spec, anchors),
                _ => gspo_loss(policy, group, &adv, spec, anchors),
            }
        }
        Method::Real => real_loss(policy, group, spec, anchors),
        Method::RealVanilla => vanilla_real_loss(policy, group, spec, anchors),
        Method::RealBce => bce_loss(policy, group, spec, anchors),
    }
}
