//! Progressive context scaling: length-phased training plans plus
//! difficulty-aware retrospective sampling.
//!
//! Training proceeds in phases, each admitting instances up to a larger
//! input length. Phase `k` (0-based) covers lengths in
//! `(threshold[k-1], threshold[k]]`, with an implicit lower bound of zero
//! for the first phase; instances longer than the last threshold are
//! excluded. Later phases can mix in hard instances revisited from earlier
//! phases: an instance's difficulty is the reciprocal of its mean reward,
//! and instances the policy never solved (mean reward zero) are infinitely
//! hard, so they are always retained first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A phased training plan over input lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    /// Inclusive upper input-length bound of each phase; strictly
    /// increasing.
    pub thresholds: Vec<usize>,
    /// Optimization steps spent in each phase; same length as
    /// `thresholds`.
    pub steps_per_phase: Vec<usize>,
    /// Fraction of each batch (phases after the first) drawn from the
    /// hardest instances of earlier phases; in `[0, 1)`.
    #[serde(default)]
    pub retro_fraction: f64,
}

impl PhasePlan {
    /// Single-phase plan: no length staging, no retrospective mixing.
    pub fn single(max_length: usize, steps: usize) -> Self {
        Self {
            thresholds: vec![max_length],
            steps_per_phase: vec![steps],
            retro_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("phase plan needs at least one phase".into()));
        }
        if self.thresholds[0] == 0 {
            return Err(Error::Config("phase thresholds must be positive".into()));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "phase thresholds {:?} must be strictly increasing",
                self.thresholds
            )));
        }
        if self.steps_per_phase.len() != self.thresholds.len() {
            return Err(Error::Config(format!(
                "{} phases but {} step budgets",
                self.thresholds.len(),
                self.steps_per_phase.len()
            )));
        }
        if self.steps_per_phase.iter().any(|&s| s == 0) {
            return Err(Error::Config("every phase needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.retro_fraction) {
            return Err(Error::Config(format!(
                "retro_fraction {} outside [0, 1)",
                self.retro_fraction
            )));
        }
        Ok(())
    }

    pub fn num_phases(&self) -> usize {
        self.thresholds.len()
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_phase.iter().sum()
    }

    /// Phase of a global step index (0-based); steps beyond the plan stay
    /// in the last phase.
    pub fn phase_of_step(&self, step: usize) -> usize {
        let mut remaining = step;
        for (k, &s) in self.steps_per_phase.iter().enumerate() {
            if remaining < s {
                return k;
            }
            remaining -= s;
        }
        self.num_phases() - 1
    }

    /// Phase admitting the given input length, or `None` when the length
    /// exceeds every threshold.
    pub fn assign_phase(&self, input_length: usize) -> Option<usize> {
        self.thresholds.iter().position(|&t| input_length <= t)
    }
}

/// Rolling per-instance reward statistics for difficulty scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub instance_id: String,
    /// Mean reward over the group rolled out for this instance.
    pub mean_reward: f64,
}

impl DifficultyRecord {
    /// Reciprocal-reward difficulty; infinite when the instance was never
    /// solved.
    pub fn difficulty(&self) -> f64 {
        difficulty_score(self.mean_reward)
    }

    pub fn is_zero_accuracy(&self) -> bool {
        self.mean_reward == 0.0
    }
}

/// Difficulty of an instance with the given mean reward.
pub fn difficulty_score(mean_reward: f64) -> f64 {
    if mean_reward == 0.0 {
        f64::INFINITY
    } else {
        1.0 / mean_reward
    }
}

/// Pick `n` instances to revisit from `pool`, hardest-biased.
///
/// Never-solved instances (mean reward zero) are taken first, in pool
/// order. Remaining slots are filled by weighted sampling without
/// replacement from the rest, where an instance's weight is its difficulty;
/// each draw renormalizes over the instances still in the pool. Asking for
/// at least the whole pool returns it in pool order.
pub fn retrospective_sample(
    pool: &[DifficultyRecord],
    n: usize,
    seed: u64,
    tags: &[u64],
) -> Result<Vec<String>> {
    for r in pool {
        if !(r.mean_reward >= 0.0) || !r.mean_reward.is_finite() {
            return Err(Error::Config(format!(
                "instance {} has invalid mean reward {}",
                r.instance_id, r.mean_reward
            )));
        }
    }
    if n >= pool.len() {
        return Ok(pool.iter().map(|r| r.instance_id.clone()).collect());
    }
    let mut picked = Vec::with_capacity(n);
    for r in pool {
        if picked.len() == n {
            return Ok(picked);
        }
        if r.is_zero_accuracy() {
            picked.push(r.instance_id.clone());
        }
    }
    let mut rng = rng::stream(seed, tags);
    let mut rest: Vec<&DifficultyRecord> =
        pool.iter().filter(|r| !r.is_zero_accuracy()).collect();
    while picked.len() < n {
        let total: f64 = rest.iter().map(|r| r.difficulty()).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = rest.len() - 1;
        for (i, r) in rest.iter().enumerate() {
            u -= r.difficulty();
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
        picked.push(rest.remove(chosen).instance_id.clone());
    }
    Ok(picked)
}
