//! A desk-scale laboratory for group-based policy optimisation with
//! verifiable rewards.
//!
//! Policies are order-k tabular softmax models, so every log-probability,
//! gradient, entropy and KL divergence is exact. On top of them the crate
//! implements the clipped-surrogate family (GRPO, DAPO, GSPO) and the
//! reward-as-label family (REAL with anchor logits, its anchor-free variant
//! and a BCE variant), closed-form gradient-weight calculators with a
//! finite-difference oracle, and a deterministic training loop.
//!
//! ```
//! use rlvr_lab::objectives::{compute_loss, KlAnchors, LossSpec, Method};
//! use rlvr_lab::policy::TabularPolicy;
//! use rlvr_lab::rollout::{generate_group, Task};
//! use rlvr_lab::seed::SeedStream;
//!
//! let task: Task = "parity:3".parse()?;
//! let policy = TabularPolicy::new(3, task.vocab())?;
//! let old = policy.snapshot();
//! let mut rng = SeedStream::new(1).rng("doc", &[]);
//! let group = generate_group(&old, &task.prompt(5)?, 8, 0.6, 32, &mut rng)?;
//!
//! let out = compute_loss(&policy, &group, &LossSpec::for_method(Method::Real), &KlAnchors::none())?;
//! assert!(out.rollout_weights.iter().all(|w| w.magnitude <= 2.0));
//! # Ok::<(), rlvr_lab::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod gradan;
pub mod math;
pub mod objectives;
pub mod policy;
pub mod rollout;
pub mod seed;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/gradient-weights.md")]
    mod gradient_weights {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
