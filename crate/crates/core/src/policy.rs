//! Order-k tabular softmax policies.
//!
//! A [`TabularPolicy`] maps a [`ContextKey`] (prompt id plus the last `k`
//! generated tokens) to a row of `V` logits. Rows that were never written
//! read as all-zero, i.e. the uniform distribution. Because every quantity is
//! a closed-form function of one logit row, log-probabilities, their
//! gradients, entropies and KL divergences are exact.
//!
//! [`PolicySnapshot`] is a frozen, cheaply clonable copy used as the old
//! (behaviour) policy and as the reference policy.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math;

pub type Token = u32;

/// Padding marker for context positions before the first generated token.
pub const BEGIN: Token = u32::MAX;

const POLICY_MAGIC: &str = "rlvr-lab-policy";
const POLICY_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab {
    size: u32,
    end: Token,
}

impl Vocab {
    pub fn new(size: u32, end: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("vocab size {size} < 2")));
        }
        if end >= size {
            return Err(Error::invalid(format!("END token {end} outside vocab of size {size}")));
        }
        Ok(Self { size, end })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn end(&self) -> Token {
        self.end
    }

    pub fn contains(&self, tok: Token) -> bool {
        tok < self.size
    }

    pub(crate) fn check(&self, tok: Token) -> Result<()> {
        if self.contains(tok) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "token {tok} outside vocab of size {}",
                self.size
            )))
        }
    }
}

/// Conditioning for one generation step: prompt id and the last `k`
/// generated tokens, left-padded with [`BEGIN`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey {
    prompt: u32,
    history: Box<[Token]>,
}

impl ContextKey {
    pub fn new(prompt: u32, history: Vec<Token>) -> Self {
        Self {
            prompt,
            history: history.into_boxed_slice(),
        }
    }

    /// Context seen when generating the token after `generated`.
    pub fn at(prompt: u32, order: usize, generated: &[Token]) -> Self {
        let mut history = vec![BEGIN; order];
        let tail = &generated[generated.len().saturating_sub(order)..];
        history[order - tail.len()..].copy_from_slice(tail);
        Self::new(prompt, history)
    }

    pub fn prompt(&self) -> u32 {
        self.prompt
    }

    pub fn history(&self) -> &[Token] {
        &self.history
    }

    pub fn order(&self) -> usize {
        self.history.len()
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.prompt)?;
        for &t in self.history.iter() {
            if t == BEGIN {
                f.write_str(" ^")?;
            } else {
                write!(f, " {t}")?;
            }
        }
        Ok(())
    }
}

fn parse_context(s: &str, order: usize, line: usize) -> Result<ContextKey> {
    let mut parts = s.split_whitespace();
    let prompt = parts
        .next()
        .ok_or_else(|| Error::parse(line, "missing prompt id"))?
        .parse::<u32>()
        .map_err(|e| Error::parse(line, format!("bad prompt id: {e}")))?;
    let history = parts
        .map(|p| {
            if p == "^" {
                Ok(BEGIN)
            } else {
                p.parse::<Token>()
                    .map_err(|e| Error::parse(line, format!("bad context token {p:?}: {e}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if history.len() != order {
        return Err(Error::parse(
            line,
            format!("context has {} tokens, order is {order}", history.len()),
        ));
    }
    Ok(ContextKey::new(prompt, history))
}

pub(crate) fn parse_floats(s: &str, expected: usize, line: usize) -> Result<Vec<f64>> {
    let values = s
        .split_whitespace()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| Error::parse(line, format!("bad number {v:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::parse(
            line,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub(crate) fn write_floats(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, " {v:?}");
    }
}

/// Read access to a logit table. Everything a loss needs from a policy is
/// derived from [`Policy::row`].
pub trait Policy {
    fn vocab(&self) -> Vocab;

    fn order(&self) -> usize;

    /// Stored logits for `ctx`, or `None` when the row was never written.
    fn row(&self, ctx: &ContextKey) -> Option<&[f64]>;

    fn context(&self, prompt: u32, generated: &[Token]) -> ContextKey {
        ContextKey::at(prompt, self.order(), generated)
    }

    fn log_probs(&self, ctx: &ContextKey) -> Vec<f64> {
        match self.row(ctx) {
            Some(row) => math::log_softmax(row),
            None => vec![-(self.vocab().size() as f64).ln(); self.vocab().size()],
        }
    }

    fn probs(&self, ctx: &ContextKey) -> Vec<f64> {
        self.log_probs(ctx).into_iter().map(f64::exp).collect()
    }

    /// `log π(tok | ctx)`.
    fn token_logprob(&self, ctx: &ContextKey, tok: Token) -> Result<f64> {
        self.vocab().check(tok)?;
        Ok(self.log_probs(ctx)[tok as usize])
    }

    fn entropy(&self, ctx: &ContextKey) -> f64 {
        let lp = self.log_probs(ctx);
        let h: f64 = lp
            .iter()
            .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { -l.exp() * l })
            .sum();
        h.max(0.0)
    }

    /// Draw from `softmax(logits / temperature)`.
    fn sample_token<R: Rng + ?Sized>(&self, ctx: &ContextKey, temperature: f64, rng: &mut R) -> Result<Token>
    where
        Self: Sized,
    {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let weights = match self.row(ctx) {
            Some(row) => {
                let scaled: Vec<f64> = row.iter().map(|z| z / temperature).collect();
                math::softmax(&scaled)
            }
            None => vec![1.0; self.vocab().size()],
        };
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::NumericFault(format!("cannot sample from row {ctx}: {e}")))?;
        Ok(dist.sample(rng) as Token)
    }
}

/// `KL(a(·|ctx) || b(·|ctx))`, computed exactly over the row.
pub fn exact_kl<A: Policy, B: Policy>(a: &A, b: &B, ctx: &ContextKey) -> Result<f64> {
    if a.vocab() != b.vocab() {
        return Err(Error::invalid("KL between policies with different vocabularies"));
    }
    let la = a.log_probs(ctx);
    let lb = b.log_probs(ctx);
    let kl: f64 = la
        .iter()
        .zip(&lb)
        .map(|(&pa, &pb)| {
            if pa == f64::NEG_INFINITY {
                0.0
            } else {
                pa.exp() * (pa - pb)
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Sparse gradient over policy parameters, stored row-dense per touched
/// context. Iteration order is the canonical `ContextKey` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl GradientVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn row_mut(&mut self, ctx: &ContextKey, vocab_size: usize) -> &mut Vec<f64> {
        self.rows.entry(ctx.clone()).or_insert_with(|| vec![0.0; vocab_size])
    }

    pub fn get(&self, ctx: &ContextKey, tok: Token) -> f64 {
        self.rows
            .get(ctx)
            .and_then(|r| r.get(tok as usize).copied())
            .unwrap_or(0.0)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextKey> {
        self.rows.keys()
    }

    /// Number of touched rows.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|g| g.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|&g| g == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(ctx, row.len());
            for (d, g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.rows.values_mut().flatten() {
            *g *= factor;
        }
    }

    /// `self += scale * ∇ log π(tok | ctx)` where `probs` is the row's softmax.
    pub(crate) fn add_logprob_grad(&mut self, ctx: &ContextKey, probs: &[f64], tok: Token, scale: f64) {
        let row = self.row_mut(ctx, probs.len());
        for (j, (g, p)) in row.iter_mut().zip(probs).enumerate() {
            let onehot = if j == tok as usize { 1.0 } else { 0.0 };
            *g += scale * (onehot - p);
        }
    }
}

/// Order-k tabular softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    order: usize,
    vocab: Vocab,
    params: BTreeMap<ContextKey, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(order: usize, vocab: Vocab) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("context order must be at least 1"));
        }
        Ok(Self {
            order,
            vocab,
            params: BTreeMap::new(),
        })
    }

    fn check_context(&self, ctx: &ContextKey) -> Result<()> {
        if ctx.order() != self.order {
            return Err(Error::invalid(format!(
                "context of order {} for a policy of order {}",
                ctx.order(),
                self.order
            )));
        }
        Ok(())
    }

    /// Overwrite one row of logits.
    pub fn set_row(&mut self, ctx: ContextKey, logits: Vec<f64>) -> Result<()> {
        self.check_context(&ctx)?;
        if logits.len() != self.vocab.size() {
            return Err(Error::invalid(format!(
                "row has {} logits, vocab size is {}",
                logits.len(),
                self.vocab.size()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NumericFault(format!("non-finite logit in row {ctx}")));
        }
        self.params.insert(ctx, logits);
        Ok(())
    }

    /// Mutable row access; unwritten rows are materialised as zeros.
    pub fn row_mut(&mut self, ctx: &ContextKey) -> &mut Vec<f64> {
        let v = self.vocab.size();
        self.params.entry(ctx.clone()).or_insert_with(|| vec![0.0; v])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.params.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn written_rows(&self) -> usize {
        self.params.len()
    }

    /// Exact `∇_θ log π(tok | ctx) = onehot(tok) − softmax(row)`, supported on
    /// `ctx`'s row only.
    pub fn logprob_grad(&self, ctx: &ContextKey, tok: Token) -> Result<GradientVector> {
        self.vocab.check(tok)?;
        let mut g = GradientVector::new();
        g.add_logprob_grad(ctx, &self.probs(ctx), tok, 1.0);
        Ok(g)
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    /// Line-oriented checkpoint text; floats use shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{POLICY_MAGIC} {POLICY_VERSION}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "vocab {} {}", self.vocab.size, self.vocab.end);
        let _ = writeln!(out, "rows {}", self.params.len());
        for (ctx, row) in &self.params {
            let _ = write!(out, "{ctx} |");
            write_floats(&mut out, row);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_lines(&mut text.lines().enumerate().map(|(i, l)| (i + 1, l)))
    }

    /// Parse a policy block from numbered lines, consuming exactly the
    /// header plus the declared number of rows.
    pub(crate) fn from_lines<'a, I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Corrupt(format!("policy truncated before {what}")))
        };

        let (n, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(POLICY_MAGIC) {
            return Err(Error::parse(n, "not a policy checkpoint"));
        }
        let version = parts.next().unwrap_or("");
        if version != POLICY_VERSION {
            return Err(Error::VersionMismatch {
                found: version.to_string(),
                expected: POLICY_VERSION.to_string(),
            });
        }

        let field = |line: (usize, &str), key: &str, count: usize| -> Result<Vec<u64>> {
            let (n, text) = line;
            let mut parts = text.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::parse(n, format!("expected `{key}`")));
            }
            let values = parts
                .map(|p| p.parse::<u64>().map_err(|e| Error::parse(n, format!("{key}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != count {
                return Err(Error::parse(n, format!("`{key}` takes {count} values")));
            }
            Ok(values)
        };

        let order = field(next("order")?, "order", 1)?[0] as usize;
        let v = field(next("vocab")?, "vocab", 2)?;
        let vocab = Vocab::new(v[0] as u32, v[1] as Token)?;
        let rows = field(next("rows")?, "rows", 1)?[0] as usize;

        let mut policy = TabularPolicy::new(order, vocab)?;
        for _ in 0..rows {
            let (n, line) = next("row")?;
            let (ctx, logits) = line
                .split_once('|')
                .ok_or_else(|| Error::parse(n, "row missing `|` separator"))?;
            let ctx = parse_context(ctx, order, n)?;
            let logits = parse_floats(logits, vocab.size(), n)?;
            policy
                .set_row(ctx, logits)
                .map_err(|e| Error::parse(n, e.to_string()))?;
        }
        Ok(policy)
    }

    /// SHA-256 over the checkpoint text; equal fingerprints mean bit-equal
    /// parameters.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

impl Policy for TabularPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn row(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.params.get(ctx).map(Vec::as_slice)
    }
}

/// Immutable copy of a policy; clones share storage.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<TabularPolicy>);

impl PolicySnapshot {
    pub fn policy(&self) -> &TabularPolicy {
        &self.0
    }

    pub fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }
}

impl Policy for PolicySnapshot {
    fn vocab(&self) -> Vocab {
        self.0.vocab
    }

    fn order(&self) -> usize {
        self.0.order
    }

    fn row(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.0.row(ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// AdamW state: global step counter plus per-row moment estimates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<ContextKey, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        let _ = writeln!(out, "adam-step {}", self.step);
        let _ = writeln!(out, "moments {}", self.moments.len());
        for (ctx, m) in &self.moments {
            let _ = write!(out, "{ctx} |");
            write_floats(out, &m.first);
            out.push_str(" |");
            write_floats(out, &m.second);
            out.push('\n');
        }
    }

    pub(crate) fn from_lines<'a, I>(lines: &mut I, order: usize, vocab: usize) -> Result<Self>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        let mut next = || {
            lines
                .next()
                .ok_or_else(|| Error::Corrupt("optimizer state truncated".into()))
        };
        let scalar = |(n, line): (usize, &str), key: &str| -> Result<u64> {
            line.strip_prefix(key)
                .and_then(|rest| rest.trim().parse::<u64>().ok())
                .ok_or_else(|| Error::parse(n, format!("expected `{key} <integer>`")))
        };
        let step = scalar(next()?, "adam-step")?;
        let count = scalar(next()?, "moments")?;
        let mut moments = BTreeMap::new();
        for _ in 0..count {
            let (n, line) = next()?;
            let mut parts = line.split('|');
            let (Some(ctx), Some(first), Some(second), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(n, "moment row needs `ctx | m | v`"));
            };
            moments.insert(
                parse_context(ctx, order, n)?,
                Moments {
                    first: parse_floats(first, vocab, n)?,
                    second: parse_floats(second, vocab, n)?,
                },
            );
        }
        Ok(Self { step, moments })
    }
}

/// One AdamW step (decoupled weight decay, bias-corrected moments) on the
/// rows touched by `grad`. Rejects non-finite gradients without mutating
/// anything.
pub fn apply_update(
    policy: &mut TabularPolicy,
    grad: &GradientVector,
    opt: &mut OptimizerState,
    config: &AdamConfig,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NumericFault("non-finite gradient".into()));
    }
    for ctx in grad.contexts() {
        policy.check_context(ctx)?;
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;
    let v = policy.vocab.size();
    for (ctx, g) in grad.rows() {
        let m = opt.moments.entry(ctx.clone()).or_insert_with(|| Moments {
            first: vec![0.0; v],
            second: vec![0.0; v],
        });
        let theta = policy.row_mut(ctx);
        for j in 0..v {
            theta[j] -= lr * config.weight_decay * theta[j];
            m.first[j] = config.beta1 * m.first[j] + (1.0 - config.beta1) * g[j];
            m.second[j] = config.beta2 * m.second[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m.first[j] / bias1;
            let v_hat = m.second[j] / bias2;
            theta[j] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}
