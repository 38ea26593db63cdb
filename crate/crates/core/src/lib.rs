//! Desk-scale long-context QA reinforcement learning.
//!
//! This crate implements a complete, deterministic RL pipeline for a
//! synthetic long-context question-answering task:
//!
//! 1. [`corpus`] — key/value retrieval corpus, word-level codec, dataset
//!    files, and the QA prompt template.
//! 2. [`policy`] — a linear-softmax autoregressive toy policy with exact
//!    log-probabilities and analytic gradients.
//! 3. [`rewards`] — answer extraction, rule verification, an LLM judge
//!    (mock and HTTP backends), and overlong-output reward shaping.
//! 4. [`objectives`] — group-normalized advantages plus GRPO, DAPO
//!    (token-level, decoupled clips, dynamic sampling filter), and
//!    PPO-clip surrogate objectives with analytic gradients.
//! 5. [`curriculum`] — progressive context-length scheduling and
//!    difficulty-aware retrospective sampling.
//! 6. [`sft`] — warm-up supervised fine-tuning on gold demonstrations.
//! 7. [`trainer`] — the staged RL loop tying everything together.
//! 8. [`eval`] — accuracy evaluation, unbiased Pass@K, metrics export.
//!
//! Everything is pure CPU `f64` math; every sampled bit flows from
//! explicitly derived [`rng`] streams so identical configurations produce
//! byte-identical artifacts.

pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod sft;
pub mod trainer;

pub use error::{Error, Result};
