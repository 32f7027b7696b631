//! Training configuration: a flat `key = value` text format with a typed
//! schema.
//!
//! `#` starts a comment. Every key is optional; `method` is resolved first
//! and supplies the defaults for the loss hyperparameters, which the other
//! keys may then override. Unknown keys are rejected all at once.
//!
//! ```
//! use rlvr_lab::config::TrainConfig;
//!
//! let cfg = TrainConfig::from_text("method = grpo\nsteps = 10 # short run\n").unwrap();
//! assert_eq!(cfg.loss.beta, 0.001);
//! assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
//! assert!(TrainConfig::from_text("stpes = 10").is_err());
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::{LossSpec, Method};
use crate::policy::AdamConfig;
use crate::rollout::Task;

/// Every accepted key, in canonical output order.
pub const KEYS: &[&str] = &[
    "task",
    "task_size",
    "context_order",
    "method",
    "tau",
    "eps_low",
    "eps_high",
    "beta",
    "kl_mode",
    "aggregation",
    "steps",
    "batch_size",
    "mini_batch_size",
    "group_size",
    "updates_per_mini_batch",
    "shuffle_mini_batches",
    "learning_rate",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "temperature",
    "max_len",
    "eval_interval",
    "eval_prompts",
    "eval_samples",
    "eval_temperature",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub context_order: usize,
    pub loss: LossSpec,
    pub steps: u64,
    /// Prompts per outer step.
    pub batch_size: usize,
    /// Prompts per optimizer update.
    pub mini_batch_size: usize,
    pub group_size: usize,
    pub updates_per_mini_batch: usize,
    pub shuffle_mini_batches: bool,
    pub adam: AdamConfig,
    pub temperature: f64,
    pub max_len: usize,
    /// Evaluate every this many steps (and after the last step).
    pub eval_interval: u64,
    pub eval_prompts: usize,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(Method::Real)
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            task: Task::Parity { bits: 6 },
            context_order: 3,
            loss: LossSpec::for_method(method),
            steps: 500,
            batch_size: 32,
            mini_batch_size: 8,
            group_size: 8,
            updates_per_mini_batch: 1,
            shuffle_mini_batches: false,
            adam: AdamConfig::default(),
            temperature: 0.6,
            max_len: 32,
            eval_interval: 50,
            eval_prompts: 200,
            eval_samples: 16,
            eval_temperature: 0.6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("mini_batch_size", self.mini_batch_size),
            ("updates_per_mini_batch", self.updates_per_mini_batch),
            ("max_len", self.max_len),
            ("eval_prompts", self.eval_prompts),
            ("eval_samples", self.eval_samples),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{key} must be positive")));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("eval_interval must be positive"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if !self.batch_size.is_multiple_of(self.mini_batch_size) {
            return Err(Error::invalid(format!(
                "mini_batch_size {} does not divide batch_size {}",
                self.mini_batch_size, self.batch_size
            )));
        }
        if !(1..=16).contains(&self.context_order) {
            return Err(Error::invalid("context_order must lie in 1..=16"));
        }
        for (key, t) in [
            ("temperature", self.temperature),
            ("eval_temperature", self.eval_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{key} must be positive, got {t}")));
            }
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(a.weight_decay >= 0.0 && a.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        for (key, b) in [("adam_beta1", a.beta1), ("adam_beta2", a.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{key} must lie in [0, 1), got {b}")));
            }
        }
        if !(a.epsilon > 0.0) {
            return Err(Error::invalid("adam_epsilon must be positive"));
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with_overrides(text, &[] as &[&str])
    }

    /// Parse `text`, then apply `key=value` overrides (later wins).
    pub fn from_text_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut entries = parse_entries(text)?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {o:?} is not key=value")))?;
            entries.insert(
                k.trim().to_string(),
                Entry {
                    line: None,
                    value: v.trim().to_string(),
                },
            );
        }
        Self::from_entries(&entries)
    }

    fn from_entries(entries: &BTreeMap<String, Entry>) -> Result<Self> {
        let unknown: Vec<String> = entries
            .keys()
            .filter(|k| !KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let method = match entries.get("method") {
            Some(e) => e.parse::<Method>("method")?,
            None => Method::Real,
        };
        let mut cfg = Self::for_method(method);
        let name = entries.get("task").map(|e| e.value.as_str()).unwrap_or(cfg.task.name());
        let size = match entries.get("task_size") {
            Some(e) => e.parse("task_size")?,
            None => cfg.task.size(),
        };
        cfg.task = Task::new(name, size).map_err(|err| match entries.get("task") {
            Some(e) => e.error("task", err),
            None => err,
        })?;
        for key in KEYS {
            if matches!(*key, "task" | "task_size" | "method") {
                continue;
            }
            if let Some(e) = entries.get(*key) {
                cfg.apply(key, e)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, e: &Entry) -> Result<()> {
        match key {
            "context_order" => self.context_order = e.parse(key)?,
            "tau" => self.loss.tau = e.parse(key)?,
            "eps_low" => self.loss.clip.low = e.parse(key)?,
            "eps_high" => self.loss.clip.high = e.parse(key)?,
            "beta" => self.loss.beta = e.parse(key)?,
            "kl_mode" => self.loss.kl_mode = e.parse(key)?,
            "aggregation" => self.loss.aggregation = e.parse(key)?,
            "steps" => self.steps = e.parse(key)?,
            "batch_size" => self.batch_size = e.parse(key)?,
            "mini_batch_size" => self.mini_batch_size = e.parse(key)?,
            "group_size" => self.group_size = e.parse(key)?,
            "updates_per_mini_batch" => self.updates_per_mini_batch = e.parse(key)?,
            "shuffle_mini_batches" => self.shuffle_mini_batches = e.parse(key)?,
            "learning_rate" => self.adam.learning_rate = e.parse(key)?,
            "weight_decay" => self.adam.weight_decay = e.parse(key)?,
            "adam_beta1" => self.adam.beta1 = e.parse(key)?,
            "adam_beta2" => self.adam.beta2 = e.parse(key)?,
            "adam_epsilon" => self.adam.epsilon = e.parse(key)?,
            "temperature" => self.temperature = e.parse(key)?,
            "max_len" => self.max_len = e.parse(key)?,
            "eval_interval" => self.eval_interval = e.parse(key)?,
            "eval_prompts" => self.eval_prompts = e.parse(key)?,
            "eval_samples" => self.eval_samples = e.parse(key)?,
            "eval_temperature" => self.eval_temperature = e.parse(key)?,
            "seed" => self.seed = e.parse(key)?,
            _ => unreachable!("key list and match arms agree"),
        }
        Ok(())
    }

    /// Canonical text: every key, floats in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }

    fn value(&self, key: &str) -> String {
        let l = &self.loss;
        let a = &self.adam;
        match key {
            "task" => self.task.name().to_string(),
            "task_size" => self.task.size().to_string(),
            "context_order" => self.context_order.to_string(),
            "method" => l.method.name().to_string(),
            "tau" => format!("{:?}", l.tau),
            "eps_low" => format!("{:?}", l.clip.low),
            "eps_high" => format!("{:?}", l.clip.high),
            "beta" => format!("{:?}", l.beta),
            "kl_mode" => l.kl_mode.name().to_string(),
            "aggregation" => l.aggregation.name().to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "mini_batch_size" => self.mini_batch_size.to_string(),
            "group_size" => self.group_size.to_string(),
            "updates_per_mini_batch" => self.updates_per_mini_batch.to_string(),
            "shuffle_mini_batches" => self.shuffle_mini_batches.to_string(),
            "learning_rate" => format!("{:?}", a.learning_rate),
            "weight_decay" => format!("{:?}", a.weight_decay),
            "adam_beta1" => format!("{:?}", a.beta1),
            "adam_beta2" => format!("{:?}", a.beta2),
            "adam_epsilon" => format!("{:?}", a.epsilon),
            "temperature" => format!("{:?}", self.temperature),
            "max_len" => self.max_len.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_prompts" => self.eval_prompts.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "eval_temperature" => format!("{:?}", self.eval_temperature),
            "seed" => self.seed.to_string(),
            _ => unreachable!("key list and match arms agree"),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    /// 1-based source line; `None` for command-line overrides.
    line: Option<usize>,
    value: String,
}

impl Entry {
    fn error(&self, key: &str, err: impl std::fmt::Display) -> Error {
        let msg = format!("{key}: {err}");
        match self.line {
            Some(n) => Error::parse(n, msg),
            None => Error::invalid(format!("override {msg}")),
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .parse()
            .map_err(|e| self.error(key, format!("{e} ({:?})", self.value)))
    }
}

fn parse_entries(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(n, format!("expected `key = value`, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::parse(n, "empty key or value"));
        }
        let prev = entries.insert(
            k.to_string(),
            Entry {
                line: Some(n),
                value: v.to_string(),
            },
        );
        if let Some(prev) = prev {
            return Err(Error::parse(
                n,
                format!("duplicate key {k:?} (first set on line {})", prev.line.unwrap_or(0)),
            ));
        }
    }
    Ok(entries)
}
