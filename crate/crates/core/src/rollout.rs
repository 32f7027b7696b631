//! Verifiable-reward tasks, rollout sampling and group construction.
//!
//! Two toy tasks with enumerable ground truth are provided:
//!
//! * `parity`: the prompt is an `n`-bit string; the answer is its parity bit.
//! * `modsum`: the prompt is an `n`-digit string; the answer is the digit sum
//!   mod 10.
//!
//! The answer of a rollout is its last token before END, or its last token
//! when it was truncated at `max_len`. A prompt's id is its index in the
//! task's prompt space, so two prompts with the same content share policy
//! rows.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Policy, Token, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Parity { bits: u32 },
    ModSum { digits: u32 },
}

impl Task {
    pub fn new(name: &str, size: u32) -> Result<Self> {
        let task = match name {
            "parity" => Task::Parity { bits: size },
            "modsum" => Task::ModSum { digits: size },
            other => return Err(Error::invalid(format!("unknown task {other:?}"))),
        };
        task.validate()?;
        Ok(task)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Task::Parity { bits } if !(1..=20).contains(&bits) => {
                Err(Error::invalid(format!("parity needs 1..=20 bits, got {bits}")))
            }
            Task::ModSum { digits } if !(1..=6).contains(&digits) => {
                Err(Error::invalid(format!("modsum needs 1..=6 digits, got {digits}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Parity { .. } => "parity",
            Task::ModSum { .. } => "modsum",
        }
    }

    pub fn size(&self) -> u32 {
        match *self {
            Task::Parity { bits } => bits,
            Task::ModSum { digits } => digits,
        }
    }

    fn base(&self) -> u32 {
        match self {
            Task::Parity { .. } => 2,
            Task::ModSum { .. } => 10,
        }
    }

    /// Answer symbols are `0..base`; END follows them.
    pub fn vocab(&self) -> Vocab {
        let base = self.base();
        Vocab::new(base + 1, base).expect("task vocab is valid")
    }

    pub fn prompt_count(&self) -> u32 {
        self.base().pow(self.size())
    }

    /// Prompt with index `id` (its content read as a base-`b` numeral,
    /// most significant symbol first).
    pub fn prompt(&self, id: u32) -> Result<Prompt> {
        if id >= self.prompt_count() {
            return Err(Error::invalid(format!(
                "prompt id {id} outside {} prompt space of size {}",
                self.name(),
                self.prompt_count()
            )));
        }
        let base = self.base();
        let mut tokens = vec![0; self.size() as usize];
        let mut rest = id;
        for slot in tokens.iter_mut().rev() {
            *slot = rest % base;
            rest /= base;
        }
        Ok(Prompt {
            id,
            tokens,
            task: *self,
        })
    }

    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Prompt {
        self.prompt(rng.gen_range(0..self.prompt_count()))
            .expect("sampled id is in range")
    }

    pub fn ground_truth(&self, prompt: &Prompt) -> Token {
        let sum: u32 = prompt.tokens.iter().sum();
        sum % self.base()
    }

    /// The answer token of a rollout: last token before END, or the last
    /// emitted token when no END was produced. `None` when the answer segment
    /// is empty.
    pub fn answer(&self, tokens: &[Token]) -> Option<Token> {
        let end = self.vocab().end();
        let segment = match tokens.iter().position(|&t| t == end) {
            Some(i) => &tokens[..i],
            None => tokens,
        };
        segment.last().copied()
    }

    /// Binary verifiable reward. Never fails: malformed rollouts score 0.
    pub fn verify(&self, prompt: &Prompt, tokens: &[Token]) -> u8 {
        match self.answer(tokens) {
            Some(a) if a == self.ground_truth(prompt) => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name(), self.size())
    }
}

impl FromStr for Task {
    type Err = Error;

    /// `parity:4`, `modsum:2`
    fn from_str(s: &str) -> Result<Self> {
        let (name, size) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("task must look like name:size, got {s:?}")))?;
        let size = size
            .parse()
            .map_err(|e| Error::invalid(format!("bad task size {size:?}: {e}")))?;
        Task::new(name, size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub id: u32,
    pub tokens: Vec<Token>,
    pub task: Task,
}

/// One sampled completion with the behaviour policy's log-probabilities
/// frozen at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_id: u32,
    pub tokens: Vec<Token>,
    pub old_logprobs: Vec<f64>,
    pub reward: u8,
    pub truncated: bool,
}

impl Rollout {
    pub fn new(prompt_id: u32, tokens: Vec<Token>, old_logprobs: Vec<f64>, reward: u8) -> Result<Self> {
        let r = Rollout {
            prompt_id,
            tokens,
            old_logprobs,
            reward,
            truncated: false,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::invalid("rollout has no tokens"));
        }
        if self.tokens.len() != self.old_logprobs.len() {
            return Err(Error::invalid(format!(
                "rollout has {} tokens but {} old log-probs",
                self.tokens.len(),
                self.old_logprobs.len()
            )));
        }
        if let Some(lp) = self.old_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(Error::invalid(format!("old log-prob {lp} is not a log-probability")));
        }
        if self.reward > 1 {
            return Err(Error::invalid(format!("reward {} is not binary", self.reward)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_positive(&self) -> bool {
        self.reward == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt: Prompt,
    pub rollouts: Vec<Rollout>,
}

impl Group {
    pub fn new(prompt: Prompt, rollouts: Vec<Rollout>) -> Result<Self> {
        if rollouts.is_empty() {
            return Err(Error::invalid("group has no rollouts"));
        }
        for r in &rollouts {
            r.validate()?;
            if r.prompt_id != prompt.id {
                return Err(Error::invalid(format!(
                    "rollout for prompt {} in group for prompt {}",
                    r.prompt_id, prompt.id
                )));
            }
        }
        Ok(Self { prompt, rollouts })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn rewards(&self) -> Vec<u8> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn token_count(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }

    pub fn all_correct(&self) -> bool {
        self.rollouts.iter().all(Rollout::is_positive)
    }

    /// All rewards equal, so group-normalised advantages are undefined.
    pub fn is_degenerate(&self) -> bool {
        self.rollouts.windows(2).all(|w| w[0].reward == w[1].reward)
    }
}

/// Sample one completion autoregressively. Returns the tokens, the
/// temperature-1 log-probabilities of the emitted tokens and the truncation
/// flag.
pub fn sample_completion<P: Policy, R: Rng + ?Sized>(
    policy: &P,
    prompt_id: u32,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<Token>, Vec<f64>, bool)> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let end = policy.vocab().end();
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    while tokens.len() < max_len {
        let ctx = policy.context(prompt_id, &tokens);
        let tok = policy.sample_token(&ctx, temperature, rng)?;
        logprobs.push(policy.token_logprob(&ctx, tok)?);
        tokens.push(tok);
        if tok == end {
            return Ok((tokens, logprobs, false));
        }
    }
    Ok((tokens, logprobs, true))
}

/// Sample `group_size` rollouts for `prompt` from the behaviour policy and
/// score them with the task verifier.
pub fn generate_group<P: Policy, R: Rng + ?Sized>(
    old: &P,
    prompt: &Prompt,
    group_size: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Group> {
    if group_size < 2 {
        return Err(Error::invalid(format!("group size {group_size} < 2")));
    }
    if old.vocab() != prompt.task.vocab() {
        return Err(Error::invalid("policy vocab does not match the task"));
    }
    let rollouts = (0..group_size)
        .map(|_| {
            let (tokens, old_logprobs, truncated) = sample_completion(old, prompt.id, temperature, max_len, rng)?;
            let reward = prompt.task.verify(prompt, &tokens);
            Ok(Rollout {
                prompt_id: prompt.id,
                tokens,
                old_logprobs,
                reward,
                truncated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Group::new(prompt.clone(), rollouts)
}

/// Indices of positive (reward 1) and negative (reward 0) rollouts, each in
/// rollout order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

pub fn partition(group: &Group) -> Partition {
    let (positives, negatives) = (0..group.size()).partition(|&i| group.rollouts[i].is_positive());
    Partition { positives, negatives }
}

/// One line of the rollout JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub step: u64,
    pub prompt: u32,
    pub tokens: Vec<Token>,
    pub old_logprobs: Vec<f64>,
    pub reward: u8,
    #[serde(default)]
    pub truncated: bool,
}

impl RolloutRecord {
    pub fn from_rollout(step: u64, r: &Rollout) -> Self {
        Self {
            step,
            prompt: r.prompt_id,
            tokens: r.tokens.clone(),
            old_logprobs: r.old_logprobs.clone(),
            reward: r.reward,
            truncated: r.truncated,
        }
    }

    pub fn to_rollout(&self) -> Result<Rollout> {
        let r = Rollout {
            prompt_id: self.prompt,
            tokens: self.tokens.clone(),
            old_logprobs: self.old_logprobs.clone(),
            reward: self.reward,
            truncated: self.truncated,
        };
        r.validate()?;
        Ok(r)
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[RolloutRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a rollout log. Blank lines are skipped; any schema violation is
/// reported with its 1-based line number.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<RolloutRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RolloutRecord = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        record.to_rollout().map_err(|e| Error::parse(i + 1, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}
