//! The outer training loop, evaluation, metrics and checkpoints.
//!
//! One step: sample a batch of prompts, freeze `π_old`, draw `G` rollouts per
//! prompt, then for each mini-batch compute the configured loss against the
//! same frozen snapshot and apply one AdamW update per
//! `updates_per_mini_batch`. The reference policy is the uniform initial
//! policy.
//!
//! Randomness comes from named substreams of the config seed, keyed by step
//! (and slot), so results do not depend on the rayon worker count, and a run
//! resumed from a checkpoint continues bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::objectives::{compute_loss, KlAnchors};
use crate::policy::{apply_update, GradientVector, OptimizerState, Policy, PolicySnapshot, TabularPolicy};
use crate::rollout::{generate_group, sample_completion, Group, Prompt, Task};
use crate::seed::SeedStream;

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub policy: TabularPolicy,
    pub optimizer: OptimizerState,
    /// Completed outer steps.
    pub step: u64,
}

impl TrainState {
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            policy: TabularPolicy::new(config.context_order, config.task.vocab())?,
            optimizer: OptimizerState::new(),
            step: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// 1-based index of the completed step.
    pub step: u64,
    /// Mean `π_old` entropy over every visited position in the batch.
    pub entropy: f64,
    /// Mean reward over all rollouts.
    pub reward: f64,
    /// Mean loss over groups and updates.
    pub loss: f64,
    /// Held-out pass@1; only on evaluation steps.
    pub pass_at_1: Option<f64>,
    pub solved_ratio: f64,
    pub degenerate_fraction: f64,
    /// Seconds spent in the step. Not part of the CSV.
    pub wall_clock: f64,
}

pub const METRICS_CSV_HEADER: &str = "step,entropy,reward,loss,pass_at_1,solved_ratio,degenerate_fraction";

impl MetricsRow {
    /// CSV line without the wall-clock field, so identical runs produce
    /// byte-identical files.
    pub fn csv_line(&self) -> String {
        let pass = self.pass_at_1.map(|p| format!("{p:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{:?},{},{:?},{:?}",
            self.step, self.entropy, self.reward, self.loss, pass, self.solved_ratio, self.degenerate_fraction
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolvedRatio {
    pub ratio: f64,
    /// Set when no groups were given; `ratio` is then 0.
    pub empty: bool,
}

/// Fraction of groups whose rollouts are all correct.
pub fn solved_ratio(groups: &[Group]) -> SolvedRatio {
    if groups.is_empty() {
        return SolvedRatio {
            ratio: 0.0,
            empty: true,
        };
    }
    let solved = groups.iter().filter(|g| g.all_correct()).count();
    SolvedRatio {
        ratio: solved as f64 / groups.len() as f64,
        empty: false,
    }
}

/// Sampling settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSpec {
    pub samples: usize,
    pub temperature: f64,
    pub max_len: usize,
}

/// pass@1: mean verifier score over `spec.samples` completions for each
/// prompt. Prompt `i` draws from substream `("eval", [tag, i])`.
pub fn evaluate<P: Policy + Sync>(
    policy: &P,
    prompts: &[Prompt],
    spec: EvalSpec,
    seeds: &SeedStream,
    tag: u64,
) -> Result<f64> {
    if spec.samples == 0 {
        return Err(Error::invalid("evaluation needs at least one sample per prompt"));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("evaluation needs at least one prompt"));
    }
    let correct = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut rng = seeds.rng("eval", &[tag, i as u64]);
            let mut hits = 0usize;
            for _ in 0..spec.samples {
                let (tokens, _, _) = sample_completion(policy, prompt.id, spec.temperature, spec.max_len, &mut rng)?;
                hits += prompt.task.verify(prompt, &tokens) as usize;
            }
            Ok(hits)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / (prompts.len() * spec.samples) as f64)
}

/// The held-out evaluation prompts of a run.
pub fn eval_prompts(task: Task, count: usize, seeds: &SeedStream) -> Vec<Prompt> {
    let mut rng = seeds.rng("eval-prompts", &[]);
    (0..count).map(|_| task.sample_prompt(&mut rng)).collect()
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub metrics: MetricsRow,
    pub groups: Vec<Group>,
    /// Fingerprint of the `π_old` snapshot handed to each optimizer update.
    pub old_fingerprints: Vec<String>,
}

pub struct Trainer {
    config: TrainConfig,
    state: TrainState,
    reference: PolicySnapshot,
    seeds: SeedStream,
    eval_prompts: Vec<Prompt>,
    /// Fingerprint every update's snapshot (costly; off by default).
    pub instrument: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let state = TrainState::initial(&config)?;
        Self::resume(config, state)
    }

    pub fn resume(config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        let fresh = TrainState::initial(&config)?;
        if state.policy.order() != config.context_order || state.policy.vocab() != config.task.vocab() {
            return Err(Error::invalid("policy shape does not match the config"));
        }
        let seeds = SeedStream::new(config.seed);
        let eval_prompts = eval_prompts(config.task, config.eval_prompts, &seeds);
        Ok(Self {
            reference: fresh.policy.snapshot(),
            seeds,
            eval_prompts,
            config,
            state,
            instrument: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    pub fn evaluate_now(&self, tag: u64) -> Result<f64> {
        let spec = EvalSpec {
            samples: self.config.eval_samples,
            temperature: self.config.eval_temperature,
            max_len: self.config.max_len,
        };
        evaluate(&self.state.policy, &self.eval_prompts, spec, &self.seeds, tag)
    }

    /// Run one outer step. On error the state is left exactly as it was
    /// before the step.
    pub fn step(&mut self) -> Result<StepReport> {
        let started = Instant::now();
        let cfg = &self.config;
        let step = self.state.step;

        let mut prompt_rng = self.seeds.rng("train-prompts", &[step]);
        let prompts: Vec<Prompt> = (0..cfg.batch_size)
            .map(|_| cfg.task.sample_prompt(&mut prompt_rng))
            .collect();

        let old = self.state.policy.snapshot();
        let groups = prompts
            .par_iter()
            .enumerate()
            .map(|(slot, prompt)| {
                let mut rng = self.seeds.rng("rollouts", &[step, slot as u64]);
                generate_group(&old, prompt, cfg.group_size, cfg.temperature, cfg.max_len, &mut rng)
            })
            .collect::<Result<Vec<Group>>>()?;

        let (entropy_sum, positions) = groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .flat_map(|r| (0..r.len()).map(move |t| (r.prompt_id, &r.tokens[..t])))
            .fold((0.0, 0usize), |(h, n), (p, prefix)| {
                (h + old.entropy(&old.context(p, prefix)), n + 1)
            });
        let rollouts: usize = groups.iter().map(Group::size).sum();
        let reward = groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .map(|r| r.reward as f64)
            .sum::<f64>()
            / rollouts as f64;
        let degenerate = groups.iter().filter(|g| g.is_degenerate()).count();

        let mut order: Vec<usize> = (0..groups.len()).collect();
        if cfg.shuffle_mini_batches {
            order.shuffle(&mut self.seeds.rng("mini-batch-order", &[step]));
        }

        let mut policy = self.state.policy.clone();
        let mut optimizer = self.state.optimizer.clone();
        let anchors = KlAnchors {
            reference: Some(&self.reference),
            old: Some(&old),
        };
        let mut loss_sum = 0.0;
        let mut loss_terms = 0usize;
        let mut old_fingerprints = Vec::new();
        for chunk in order.chunks(cfg.mini_batch_size) {
            for _ in 0..cfg.updates_per_mini_batch {
                if self.instrument {
                    old_fingerprints.push(anchors.old.expect("old anchor is set").fingerprint());
                }
                let outputs = chunk
                    .par_iter()
                    .map(|&i| compute_loss(&policy, &groups[i], &cfg.loss, &anchors))
                    .collect::<Result<Vec<_>>>()?;
                let mut grad = GradientVector::new();
                let scale = 1.0 / chunk.len() as f64;
                for out in &outputs {
                    if !out.loss.is_finite() {
                        return Err(Error::NumericFault(format!(
                            "loss is {} at step {}",
                            out.loss,
                            step + 1
                        )));
                    }
                    loss_sum += out.loss;
                    loss_terms += 1;
                    grad.add_scaled(&out.grad, scale);
                }
                apply_update(&mut policy, &grad, &mut optimizer, &cfg.adam)?;
            }
        }
        if policy.rows().any(|(_, row)| row.iter().any(|z| !z.is_finite())) {
            return Err(Error::NumericFault(format!(
                "non-finite parameter after step {}",
                step + 1
            )));
        }

        let done = step + 1;
        let pass_at_1 = if done.is_multiple_of(cfg.eval_interval) || done == cfg.steps {
            let spec = EvalSpec {
                samples: cfg.eval_samples,
                temperature: cfg.eval_temperature,
                max_len: cfg.max_len,
            };
            Some(evaluate(&policy, &self.eval_prompts, spec, &self.seeds, done)?)
        } else {
            None
        };

        let metrics = MetricsRow {
            step: done,
            entropy: if positions == 0 {
                0.0
            } else {
                entropy_sum / positions as f64
            },
            reward,
            loss: loss_sum / loss_terms as f64,
            pass_at_1,
            solved_ratio: solved_ratio(&groups).ratio,
            degenerate_fraction: degenerate as f64 / groups.len() as f64,
            wall_clock: started.elapsed().as_secs_f64(),
        };
        self.state = TrainState {
            policy,
            optimizer,
            step: done,
        };
        Ok(StepReport {
            metrics,
            groups,
            old_fingerprints,
        })
    }

    /// Step until `config.steps`, handing every report to `observe`.
    pub fn run<F>(&mut self, mut observe: F) -> Result<Vec<MetricsRow>>
    where
        F: FnMut(&StepReport) -> Result<()>,
    {
        let mut rows = Vec::new();
        while !self.is_done() {
            let report = self.step()?;
            observe(&report)?;
            rows.push(report.metrics);
        }
        Ok(rows)
    }
}

/// Train from scratch to `config.steps`.
pub fn train(config: TrainConfig) -> Result<(TabularPolicy, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(config)?;
    let rows = trainer.run(|_| Ok(()))?;
    Ok((trainer.into_state().policy, rows))
}

const CHECKPOINT_MAGIC: &str = "rlvr-lab-checkpoint";
const CHECKPOINT_VERSION: &str = "1";
const END_MARKER: &str = "[end] ";

/// Self-contained checkpoint: config, policy, optimizer moments and step,
/// closed by a SHA-256 of everything before the final line.
pub fn checkpoint_text(config: &TrainConfig, state: &TrainState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(out, "step {}", state.step);
    out.push_str("[config]\n");
    out.push_str(&config.to_text());
    out.push_str("[policy]\n");
    out.push_str(&state.policy.to_text());
    out.push_str("[optimizer]\n");
    state.optimizer.write_text(&mut out);
    let digest = hex::encode(Sha256::digest(out.as_bytes()));
    let _ = writeln!(out, "{END_MARKER}{digest}");
    out
}

pub fn parse_checkpoint(text: &str) -> Result<(TrainConfig, TrainState)> {
    let first = text.lines().next().unwrap_or("");
    let mut head = first.split_whitespace();
    if head.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::parse(1, "not a trainer checkpoint"));
    }
    let version = head.next().unwrap_or("");
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }

    let body = text.strip_suffix('\n').unwrap_or(text);
    let (covered, digest) = match body.rfind('\n') {
        Some(i) if body[i + 1..].starts_with(END_MARKER) => (&text[..=i], &body[i + 1 + END_MARKER.len()..]),
        _ => return Err(Error::Corrupt("checkpoint truncated: no end marker".into())),
    };
    if hex::encode(Sha256::digest(covered.as_bytes())) != digest.trim() {
        return Err(Error::Corrupt("checkpoint digest mismatch".into()));
    }

    let mut lines = covered.lines().enumerate().map(|(i, l)| (i + 1, l)).skip(1);
    let step = match lines.next() {
        Some((n, l)) => l
            .strip_prefix("step ")
            .and_then(|v| v.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::parse(n, "expected `step <integer>`"))?,
        None => return Err(Error::Corrupt("checkpoint truncated".into())),
    };
    expect_section(&mut lines, "[config]")?;
    let mut config_text = String::new();
    loop {
        match lines.next() {
            Some((_, "[policy]")) => break,
            Some((_, l)) => {
                config_text.push_str(l);
                config_text.push('\n');
            }
            None => return Err(Error::Corrupt("checkpoint has no [policy] section".into())),
        }
    }
    let config = TrainConfig::from_text(&config_text)?;
    let policy = TabularPolicy::from_lines(&mut lines)?;
    expect_section(&mut lines, "[optimizer]")?;
    let optimizer = OptimizerState::from_lines(&mut lines, policy.order(), policy.vocab().size())?;
    if let Some((n, _)) = lines.next() {
        return Err(Error::parse(n, "unexpected content after optimizer state"));
    }
    if policy.order() != config.context_order || policy.vocab() != config.task.vocab() {
        return Err(Error::Corrupt("policy shape does not match the stored config".into()));
    }
    Ok((
        config,
        TrainState {
            policy,
            optimizer,
            step,
        },
    ))
}

fn expect_section<'a, I: Iterator<Item = (usize, &'a str)>>(lines: &mut I, name: &str) -> Result<()> {
    match lines.next() {
        Some((_, l)) if l == name => Ok(()),
        Some((n, _)) => Err(Error::parse(n, format!("expected {name}"))),
        None => Err(Error::Corrupt(format!("checkpoint truncated before {name}"))),
    }
}

/// Write atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(checkpoint_text(config, state).as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    parse_checkpoint(&fs::read_to_string(path)?)
}

/// Accept either a bare policy file or a trainer checkpoint.
pub fn policy_from_text(text: &str) -> Result<TabularPolicy> {
    if text.starts_with(CHECKPOINT_MAGIC) {
        Ok(parse_checkpoint(text)?.1.policy)
    } else {
        TabularPolicy::from_text(text)
    }
}
