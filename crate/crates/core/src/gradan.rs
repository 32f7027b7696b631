//! Gradient-weight analysis.
//!
//! Closed forms for the scalar that multiplies a token's (or rollout's)
//! score-function gradient:
//!
//! * clipped surrogate, per token: `|W| = |A·e^{s_t}|` when the min/clip
//!   keeps the ratio branch, `0` otherwise. It grows exponentially in `s_t`.
//! * REAL, per rollout: `|W| = (1/τ) / (1 + C·e^{±s̄/τ})` with
//!   `C = 1 + Σ_{others in class} e^{∓s̄_i/τ}`. It is monotone in `s̄` and
//!   strictly below `1/τ`.
//!
//! Plus tabulated weight curves, ratio-bin statistics over rollout logs and a
//! central finite-difference oracle for every loss gradient.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::objectives::{compute_loss, ClipRange, KlAnchors, LossOutput, LossSpec, Method};
use crate::policy::{ContextKey, GradientVector, Policy, TabularPolicy};
use crate::rollout::{Group, RolloutRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Positive,
    Negative,
}

impl Class {
    pub fn of_reward(reward: u8) -> Self {
        if reward == 1 {
            Class::Positive
        } else {
            Class::Negative
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Class::Positive => "positive",
            Class::Negative => "negative",
        }
    }

    /// Advantage sign used when magnitudes are `|A|`-normalised.
    pub fn unit_advantage(&self) -> f64 {
        match self {
            Class::Positive => 1.0,
            Class::Negative => -1.0,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoWeight {
    pub magnitude: f64,
    pub clipped: bool,
}

/// Per-token weight of the clipped surrogate at relative log-prob `s`.
pub fn grpo_token_weight(s: f64, advantage: f64, clip: ClipRange) -> GrpoWeight {
    let ratio = s.exp();
    let clipped = clip.is_clipped(ratio, advantage);
    GrpoWeight {
        magnitude: if clipped { 0.0 } else { (advantage * ratio).abs() },
        clipped,
    }
}

/// REAL weight for a rollout with score `s̄` given the class constant `C ≥ 1`.
pub fn real_weight(score: f64, class: Class, c: f64, tau: f64) -> f64 {
    let exponent = match class {
        Class::Positive => score / tau,
        Class::Negative => -score / tau,
    };
    (1.0 / tau) / (1.0 + c * exponent.exp())
}

/// Class constant `C = 1 + Σ_{i≠k} e^{∓s̄_i/τ}` from the other rollouts of the
/// same class.
pub fn class_constant(others: &[f64], class: Class, tau: f64) -> f64 {
    let sign = match class {
        Class::Positive => -1.0,
        Class::Negative => 1.0,
    };
    1.0 + others.iter().map(|s| (sign * s / tau).exp()).sum::<f64>()
}

/// REAL weight of rollout `k` from its score and the scores of the other
/// rollouts in its class.
pub fn real_rollout_weight(score: f64, class: Class, others: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    Ok(real_weight(score, class, class_constant(others, class, tau), tau))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveMethod {
    Grpo { advantage: f64, clip: ClipRange },
    Real { class: Class, c: f64, tau: f64 },
}

impl CurveMethod {
    pub fn weight(&self, s: f64) -> f64 {
        match *self {
            CurveMethod::Grpo { advantage, clip } => grpo_token_weight(s, advantage, clip).magnitude,
            CurveMethod::Real { class, c, tau } => real_weight(s, class, c, tau),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            CurveMethod::Grpo { clip, .. } if !(clip.low > 0.0 && clip.high > 0.0) => {
                Err(Error::invalid("clip bounds must be positive"))
            }
            CurveMethod::Real { tau, .. } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::invalid(format!("tau must be positive, got {tau}")))
            }
            CurveMethod::Real { c, .. } if !(c >= 1.0) => {
                Err(Error::invalid(format!("class constant must be >= 1, got {c}")))
            }
            _ => Ok(()),
        }
    }

    fn labels(&self) -> (&'static str, &'static str) {
        match *self {
            CurveMethod::Grpo { advantage, .. } => ("grpo", if advantage >= 0.0 { "positive" } else { "negative" }),
            CurveMethod::Real { class, .. } => ("real", class.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightCurve {
    pub method: CurveMethod,
    /// `(s, |W|)` with strictly increasing `s`.
    pub samples: Vec<(f64, f64)>,
}

pub const CURVE_CSV_HEADER: &str = "method,class,s,weight";

impl WeightCurve {
    /// CSV rows (no header) in shortest round-trip float format.
    pub fn csv_rows(&self) -> String {
        let (method, class) = self.method.labels();
        let mut out = String::new();
        for (s, w) in &self.samples {
            let _ = writeln!(out, "{method},{class},{s:?},{w:?}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{CURVE_CSV_HEADER}\n{}", self.csv_rows())
    }
}

/// Tabulate `|W|` on `n_points` uniformly spaced values in `[s_min, s_max]`.
pub fn weight_curve(method: CurveMethod, s_min: f64, s_max: f64, n_points: usize) -> Result<WeightCurve> {
    method.validate()?;
    if n_points < 2 {
        return Err(Error::invalid("a curve needs at least 2 points"));
    }
    if !(s_min < s_max) || !s_min.is_finite() || !s_max.is_finite() {
        return Err(Error::invalid(format!("bad range [{s_min}, {s_max}]")));
    }
    let span = s_max - s_min;
    let last = (n_points - 1) as f64;
    let samples = (0..n_points)
        .map(|i| {
            // exact endpoints, and exact zero on symmetric grids
            let s = if i + 1 == n_points {
                s_max
            } else {
                s_min + span * i as f64 / last
            };
            (s, method.weight(s))
        })
        .collect();
    Ok(WeightCurve { method, samples })
}

/// The four importance-ratio ranges used for bin statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RatioBin {
    BelowLower,
    LowerToOne,
    OneToUpper,
    AboveUpper,
}

impl RatioBin {
    pub const ALL: [RatioBin; 4] = [
        RatioBin::BelowLower,
        RatioBin::LowerToOne,
        RatioBin::OneToUpper,
        RatioBin::AboveUpper,
    ];

    pub fn of(ratio: f64, clip: ClipRange) -> Self {
        if ratio < clip.lower() {
            RatioBin::BelowLower
        } else if ratio < 1.0 {
            RatioBin::LowerToOne
        } else if ratio <= clip.upper() {
            RatioBin::OneToUpper
        } else {
            RatioBin::AboveUpper
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RatioBin::BelowLower => "<1-eps",
            RatioBin::LowerToOne => "[1-eps,1)",
            RatioBin::OneToUpper => "[1,1+eps]",
            RatioBin::AboveUpper => ">1+eps",
        }
    }

    /// Whether the clipped surrogate zeroes gradients in this bin for `class`.
    pub fn is_clipped_for(&self, class: Class) -> bool {
        matches!(
            (class, self),
            (Class::Positive, RatioBin::AboveUpper) | (Class::Negative, RatioBin::BelowLower)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStat {
    pub bin: RatioBin,
    pub tokens: usize,
    pub percent: f64,
    /// Mean `|W|` with `|A| = 1`; `None` for clipped bins (zero gradient) and
    /// for empty bins.
    pub avg_magnitude: Option<f64>,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBins {
    pub class: Class,
    pub tokens: usize,
    pub bins: [BinStat; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinReport {
    pub positives: ClassBins,
    pub negatives: ClassBins,
}

pub const BINS_CSV_HEADER: &str = "class,range,tokens,percent,avg_grad_mag";

impl BinReport {
    pub fn is_empty(&self) -> bool {
        self.positives.tokens == 0 && self.negatives.tokens == 0
    }

    /// CSV with `-` for clipped (zero-gradient) bins and an empty field for
    /// bins without tokens. Range labels contain commas and are quoted.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{BINS_CSV_HEADER}\n");
        for class in [&self.positives, &self.negatives] {
            for b in &class.bins {
                let avg = match (b.clipped, b.avg_magnitude) {
                    (true, _) => "-".to_string(),
                    (false, Some(v)) => format!("{v:?}"),
                    (false, None) => String::new(),
                };
                let _ = writeln!(
                    out,
                    "{},\"{}\",{},{:?},{}",
                    class.class,
                    b.bin.label(),
                    b.tokens,
                    b.percent,
                    avg
                );
            }
        }
        out
    }
}

/// Bin every logged token by its importance ratio under `policy` and report,
/// per reward class, the token share and mean `|W|` of each bin (`|A| = 1`).
pub fn ratio_bin_stats<P: Policy>(records: &[RolloutRecord], policy: &P, clip: ClipRange) -> Result<BinReport> {
    let mut counts = [[0usize; 4]; 2];
    let mut sums = [[0.0f64; 4]; 2];
    for (n, rec) in records.iter().enumerate() {
        let rollout = rec
            .to_rollout()
            .map_err(|e| Error::invalid(format!("record {n}: {e}")))?;
        let class = Class::of_reward(rollout.reward);
        let ci = (class == Class::Negative) as usize;
        for t in 0..rollout.len() {
            let ctx = policy.context(rollout.prompt_id, &rollout.tokens[..t]);
            let s = policy.token_logprob(&ctx, rollout.tokens[t])? - rollout.old_logprobs[t];
            let ratio = s.exp();
            let bin = RatioBin::of(ratio, clip) as usize;
            let w = grpo_token_weight(s, class.unit_advantage(), clip);
            counts[ci][bin] += 1;
            sums[ci][bin] += w.magnitude;
        }
    }
    let build = |class: Class| {
        let ci = (class == Class::Negative) as usize;
        let total: usize = counts[ci].iter().sum();
        let bins = RatioBin::ALL.map(|bin| {
            let bi = bin as usize;
            let tokens = counts[ci][bi];
            let clipped = bin.is_clipped_for(class);
            BinStat {
                bin,
                tokens,
                percent: if total == 0 {
                    0.0
                } else {
                    100.0 * tokens as f64 / total as f64
                },
                avg_magnitude: (!clipped && tokens > 0).then(|| sums[ci][bi] / tokens as f64),
                clipped,
            }
        });
        ClassBins {
            class,
            tokens: total,
            bins,
        }
    };
    Ok(BinReport {
        positives: build(Class::Positive),
        negatives: build(Class::Negative),
    })
}

/// Loss evaluator signature accepted by the finite-difference oracle.
pub trait LossFn: Fn(&TabularPolicy, &Group, &LossSpec, &KlAnchors) -> Result<LossOutput> {}
impl<F> LossFn for F where F: Fn(&TabularPolicy, &Group, &LossSpec, &KlAnchors) -> Result<LossOutput> {}

/// Every parameter row the group's loss depends on.
pub fn visited_contexts<P: Policy>(policy: &P, group: &Group) -> BTreeSet<ContextKey> {
    group
        .rollouts
        .iter()
        .flat_map(|r| (0..r.len()).map(move |t| policy.context(r.prompt_id, &r.tokens[..t])))
        .collect()
}

/// Central differences of `loss(policy)` over every entry of the given rows.
pub fn numerical_gradient<F: LossFn>(
    loss: &F,
    spec: &LossSpec,
    policy: &TabularPolicy,
    group: &Group,
    anchors: &KlAnchors,
    rows: &BTreeSet<ContextKey>,
    h: f64,
) -> Result<GradientVector> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let v = policy.vocab().size();
    let mut probe = policy.clone();
    let mut grad = GradientVector::new();
    let eval = |p: &TabularPolicy| -> Result<f64> {
        let l = loss(p, group, spec, anchors)?.loss;
        if !l.is_finite() {
            return Err(Error::NumericFault(format!("loss evaluated to {l}")));
        }
        Ok(l)
    };
    for ctx in rows {
        let base = policy.row(ctx).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v]);
        let mut out = vec![0.0; v];
        for j in 0..v {
            let (up, down) = (base[j] + h, base[j] - h);
            probe.row_mut(ctx)[j] = up;
            let plus = eval(&probe)?;
            probe.row_mut(ctx)[j] = down;
            let minus = eval(&probe)?;
            probe.row_mut(ctx)[j] = base[j];
            out[j] = (plus - minus) / (up - down);
        }
        grad.row_mut(ctx, v).copy_from_slice(&out);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max_j |a_j − n_j| / max(‖a‖_∞, ‖n‖_∞, 1e-12)` over compared entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub compared: usize,
    /// Every compared analytic entry is exactly zero, so the relative error
    /// only measures finite-difference roundoff.
    pub analytic_zero: bool,
    /// Entries skipped because their row sits within `10·h` (in log-ratio)
    /// of a clip boundary, where the surrogate is not differentiable.
    pub excluded: usize,
}

/// Rows whose tokens (or whole rollouts, for sequence-level clipping) lie
/// within `margin` of an active clip boundary in log-ratio space.
fn near_clip_boundary<P: Policy>(
    policy: &P,
    group: &Group,
    spec: &LossSpec,
    margin: f64,
) -> Result<BTreeSet<ContextKey>> {
    let mut rows = BTreeSet::new();
    if !spec.method.uses_advantages() {
        return Ok(rows);
    }
    let adv = crate::objectives::group_advantages(&group.rewards())?;
    if adv.degenerate {
        return Ok(rows);
    }
    let near = |log_ratio: f64, a: f64| {
        let bound = if a > 0.0 { spec.clip.upper() } else { spec.clip.lower() };
        a != 0.0 && (log_ratio - bound.ln()).abs() <= margin
    };
    for (k, r) in group.rollouts.iter().enumerate() {
        let contexts: Vec<ContextKey> = (0..r.len())
            .map(|t| policy.context(r.prompt_id, &r.tokens[..t]))
            .collect();
        let scores = contexts
            .iter()
            .zip(r.tokens.iter().zip(&r.old_logprobs))
            .map(|(ctx, (&tok, &old))| Ok(policy.token_logprob(ctx, tok)? - old))
            .collect::<Result<Vec<f64>>>()?;
        if spec.method == Method::Gspo {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            if near(mean, adv.values[k]) {
                rows.extend(contexts);
            }
        } else {
            for (ctx, s) in contexts.into_iter().zip(scores) {
                if near(s, adv.values[k]) {
                    rows.insert(ctx);
                }
            }
        }
    }
    Ok(rows)
}

/// Compare `loss`'s analytic gradient with central finite differences.
pub fn fd_check_with<F: LossFn>(
    loss: &F,
    spec: &LossSpec,
    policy: &TabularPolicy,
    group: &Group,
    anchors: &KlAnchors,
    h: f64,
) -> Result<FdReport> {
    let analytic = loss(policy, group, spec, anchors)?;
    if !analytic.loss.is_finite() {
        return Err(Error::NumericFault(format!("loss evaluated to {}", analytic.loss)));
    }
    let mut rows = visited_contexts(policy, group);
    rows.extend(analytic.grad.contexts().cloned());
    let skip = near_clip_boundary(policy, group, spec, 10.0 * h)?;
    let v = policy.vocab().size();
    let excluded = rows.intersection(&skip).count() * v;
    rows.retain(|c| !skip.contains(c));
    let numeric = numerical_gradient(loss, spec, policy, group, anchors, &rows, h)?;

    let mut scale = 1e-12f64;
    let mut max_abs = 0.0f64;
    let mut analytic_zero = true;
    for ctx in &rows {
        for j in 0..v as u32 {
            let a = analytic.grad.get(ctx, j);
            let n = numeric.get(ctx, j);
            analytic_zero &= a == 0.0;
            scale = scale.max(a.abs()).max(n.abs());
            max_abs = max_abs.max((a - n).abs());
        }
    }
    Ok(FdReport {
        max_rel_error: max_abs / scale,
        max_abs_error: max_abs,
        compared: rows.len() * v,
        analytic_zero,
        excluded,
    })
}

/// [`fd_check_with`] on [`compute_loss`].
pub fn fd_check(
    spec: &LossSpec,
    policy: &TabularPolicy,
    group: &Group,
    anchors: &KlAnchors,
    h: f64,
) -> Result<FdReport> {
    fd_check_with(
        &|p: &TabularPolicy, g: &Group, s: &LossSpec, a: &KlAnchors| compute_loss(p, g, s, a),
        spec,
        policy,
        group,
        anchors,
        h,
    )
}
