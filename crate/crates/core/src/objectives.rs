//! Policy-gradient objectives: group-relative (grouped rollouts, symmetric
//! clip, optional reference-policy KL), the decoupled-clip token-pooled
//! variant with dynamic group filtering, and the classic per-token-advantage
//! clipped surrogate.
//!
//! All objectives are exact, differentiable functions of the policy
//! weights: each returns its value together with the analytic gradient, and
//! old-policy log-probabilities are recomputed from the supplied snapshot so
//! the result depends only on `(params, params_old, params_ref, data)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    grad_weighted_logprob, token_logprobs, InstanceView, PolicyParams, Trajectory, FEATURE_DIM,
};

/// Which surrogate objective drives the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Grpo,
    Dapo,
    Ppo,
}

/// Objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub algorithm: Algorithm,
    /// Symmetric clip radius (group-relative and per-token objectives).
    pub eps: f64,
    /// Lower clip radius for the decoupled-clip objective.
    pub eps_low: f64,
    /// Upper clip radius for the decoupled-clip objective.
    pub eps_high: f64,
    /// Reference-policy KL coefficient (group-relative objective only).
    pub beta: f64,
    /// Rollouts sampled per instance.
    pub group_size: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            eps: 0.2,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            group_size: 8,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps", self.eps), ("eps_low", self.eps_low)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(Error::Config(format!(
                "eps_high {} must be a positive real",
                self.eps_high
            )));
        }
        if self.eps_low > self.eps_high {
            return Err(Error::Config(format!(
                "eps_low {} exceeds eps_high {}; decoupling widens the upper clip, \
                 never the lower one",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group_size {} leaves nothing to compare within a group",
                self.group_size
            )));
        }
        Ok(())
    }
}

/// One instance's group of rollouts plus reward bookkeeping.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub instance_id: String,
    pub view: InstanceView,
    pub trajectories: Vec<Trajectory>,
    /// Raw combined rewards, one per trajectory.
    pub rewards: Vec<f64>,
    /// Rewards after any length shaping (equal to `rewards` when shaping is
    /// off).
    pub shaped_rewards: Vec<f64>,
    /// Group-normalized advantages, one per trajectory; empty until a
    /// `normalize_*` call fills it.
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        instance_id: impl Into<String>,
        view: InstanceView,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
    ) -> Self {
        let shaped_rewards = rewards.clone();
        Self {
            instance_id: instance_id.into(),
            view,
            trajectories,
            rewards,
            shaped_rewards,
            advantages: Vec::new(),
        }
    }

    /// Fill `advantages` from the raw rewards.
    pub fn normalize_from_rewards(&mut self) -> Result<()> {
        self.advantages = group_normalize(&self.rewards)?;
        Ok(())
    }

    /// Fill `advantages` from the shaped rewards.
    pub fn normalize_from_shaped(&mut self) -> Result<()> {
        self.advantages = group_normalize(&self.shaped_rewards)?;
        Ok(())
    }

    /// True when every shaped reward in the group is identical, so the
    /// group carries no learning signal.
    pub fn is_degenerate(&self) -> bool {
        let max = self.shaped_rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.shaped_rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        max == min
    }
}

/// Normalize one group's rewards to advantages: subtract the group mean and
/// divide by the population standard deviation. A group whose rewards are
/// all identical (no signal) maps to all-zero advantages.
pub fn group_normalize(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Config("rewards must be finite".into()));
    }
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Remove groups whose shaped rewards are all identical (their normalized
/// advantages would be zero everywhere, contributing nothing but diluting
/// the token pool). Order is preserved; returns the survivors and the
/// number of groups dropped.
pub fn dynamic_filter(groups: Vec<RolloutGroup>) -> (Vec<RolloutGroup>, usize) {
    let before = groups.len();
    let kept: Vec<RolloutGroup> = groups.into_iter().filter(|g| !g.is_degenerate()).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Objective value plus exact gradient and clipping diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Fraction of tokens whose surrogate term was clipped.
    pub clip_fraction: f64,
    /// Total number of output tokens across all trajectories.
    pub tokens: usize,
}

/// Per-trajectory clipped-surrogate pieces, before any pooling scale.
struct SurrogateTerms {
    /// Per-token surrogate values `min(rho * A, clip(rho) * A)`.
    values: Vec<f64>,
    /// Per-token gradient weights: `A * rho` where the unclipped branch is
    /// active, zero where the clip binds (the term is constant there).
    weights: Vec<f64>,
    clipped: usize,
}

fn surrogate_terms(
    advantage: f64,
    lp_new: &[f64],
    lp_old: &[f64],
    clip_lo: f64,
    clip_hi: f64,
) -> SurrogateTerms {
    let mut values = Vec::with_capacity(lp_new.len());
    let mut weights = Vec::with_capacity(lp_new.len());
    let mut clipped = 0usize;
    for (&ln, &lo) in lp_new.iter().zip(lp_old) {
        let rho = (ln - lo).exp();
        let binds = (advantage > 0.0 && rho > clip_hi) || (advantage < 0.0 && rho < clip_lo);
        if binds {
            clipped += 1;
            let edge = if advantage > 0.0 { clip_hi } else { clip_lo };
            values.push(edge * advantage);
            weights.push(0.0);
        } else {
            values.push(rho * advantage);
            weights.push(rho * advantage);
        }
    }
    SurrogateTerms { values, weights, clipped }
}

/// Pointwise reference-KL estimator: with `rho = pi_ref / pi_theta`, the
/// estimate is `rho - 1 - ln rho`. Non-negative, zero iff the probabilities
/// agree, and unbiased for the KL divergence under tokens drawn from
/// `pi_theta`.
pub fn kl_point(lp_new: f64, lp_ref: f64) -> f64 {
    let log_rho = lp_ref - lp_new;
    log_rho.exp() - 1.0 - log_rho
}

fn check_groups(groups: &[RolloutGroup]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Config("objective needs at least one rollout group".into()));
    }
    for g in groups {
        if g.trajectories.len() < 2 {
            return Err(Error::Config(format!(
                "group {} has {} trajectories; need at least 2",
                g.instance_id,
                g.trajectories.len()
            )));
        }
        if g.advantages.len() != g.trajectories.len() {
            return Err(Error::Dimension(format!(
                "group {}: {} advantages for {} trajectories",
                g.instance_id,
                g.advantages.len(),
                g.trajectories.len()
            )));
        }
        if g.advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config(format!(
                "group {} has non-finite advantages",
                g.instance_id
            )));
        }
        if g.trajectories.iter().any(Trajectory::is_empty) {
            return Err(Error::Config(format!(
                "group {} contains an empty trajectory",
                g.instance_id
            )));
        }
    }
    Ok(())
}

fn check_finite(eval: &ObjectiveEval) -> Result<()> {
    if !eval.value.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Config("objective diverged to a non-finite value".into()));
    }
    Ok(())
}

/// Group-relative clipped surrogate with optional reference-policy KL
/// penalty. Pooling is hierarchical: mean over groups of the mean over
/// trajectories of the per-trajectory token mean.
pub fn grpo_objective(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    params_old: &PolicyParams,
    params_ref: Option<&PolicyParams>,
    config: &ObjectiveConfig,
) -> Result<ObjectiveEval> {
    config.validate()?;
    check_groups(groups)?;
    let reference = if config.beta > 0.0 {
        Some(params_ref.ok_or_else(|| {
            Error::Config("beta > 0 requires reference policy parameters".into())
        })?)
    } else {
        None
    };
    let (clip_lo, clip_hi) = (1.0 - config.eps, 1.0 + config.eps);
    let mut value = 0.0;
    let mut gradient = vec![0.0; FEATURE_DIM];
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let group_scale = 1.0 / groups.len() as f64;
    for g in groups {
        let traj_scale = group_scale / g.trajectories.len() as f64;
        for (traj, &adv) in g.trajectories.iter().zip(&g.advantages) {
            let lp_new = token_logprobs(params, &g.view, &traj.tokens)?;
            let lp_old = token_logprobs(params_old, &g.view, &traj.tokens)?;
            let scale = traj_scale / traj.len() as f64;
            let terms = surrogate_terms(adv, &lp_new, &lp_old, clip_lo, clip_hi);
            clipped += terms.clipped;
            tokens += traj.len();
            let mut weights = terms.weights;
            value += scale * terms.values.iter().sum::<f64>();
            if let Some(params_ref) = reference {
                let lp_ref = token_logprobs(params_ref, &g.view, &traj.tokens)?;
                for ((w, &ln), &lr) in weights.iter_mut().zip(&lp_new).zip(&lp_ref) {
                    value -= scale * config.beta * kl_point(ln, lr);
                    // d/dtheta of the pointwise KL estimate is
                    // (1 - rho_ref) * grad log pi, folded into the same
                    // per-token weight.
                    *w -= config.beta * (1.0 - (lr - ln).exp());
                }
            }
            for w in &mut weights {
                *w *= scale;
            }
            let g_traj = grad_weighted_logprob(params, &g.view, &traj.tokens, &weights)?;
            for d in 0..FEATURE_DIM {
                gradient[d] += g_traj[d];
            }
        }
    }
    let eval = ObjectiveEval {
        value,
        gradient,
        clip_fraction: if tokens == 0 { 0.0 } else { clipped as f64 / tokens as f64 },
        tokens,
    };
    check_finite(&eval)?;
    Ok(eval)
}

/// Decoupled-clip surrogate with a single global token pool: every token of
/// every trajectory carries the same weight `1 / total_tokens`, so long
/// outputs are not down-weighted relative to short ones. Groups with
/// identical shaped rewards must be filtered out beforehand.
pub fn dapo_objective(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    params_old: &PolicyParams,
    config: &ObjectiveConfig,
) -> Result<ObjectiveEval> {
    config.validate()?;
    check_groups(groups)?;
    if let Some(g) = groups.iter().find(|g| g.is_degenerate()) {
        return Err(Error::Config(format!(
            "group {} has identical shaped rewards; apply dynamic filtering first",
            g.instance_id
        )));
    }
    let (clip_lo, clip_hi) = (1.0 - config.eps_low, 1.0 + config.eps_high);
    let total_tokens: usize = groups
        .iter()
        .flat_map(|g| g.trajectories.iter())
        .map(Trajectory::len)
        .sum();
    let scale = 1.0 / total_tokens as f64;
    let mut value = 0.0;
    let mut gradient = vec![0.0; FEATURE_DIM];
    let mut clipped = 0usize;
    for g in groups {
        for (traj, &adv) in g.trajectories.iter().zip(&g.advantages) {
            let lp_new = token_logprobs(params, &g.view, &traj.tokens)?;
            let lp_old = token_logprobs(params_old, &g.view, &traj.tokens)?;
            let terms = surrogate_terms(adv, &lp_new, &lp_old, clip_lo, clip_hi);
            clipped += terms.clipped;
            value += scale * terms.values.iter().sum::<f64>();
            let weights: Vec<f64> = terms.weights.iter().map(|w| w * scale).collect();
            let g_traj = grad_weighted_logprob(params, &g.view, &traj.tokens, &weights)?;
            for d in 0..FEATURE_DIM {
                gradient[d] += g_traj[d];
            }
        }
    }
    let eval = ObjectiveEval {
        value,
        gradient,
        clip_fraction: clipped as f64 / total_tokens as f64,
        tokens: total_tokens,
    };
    check_finite(&eval)?;
    Ok(eval)
}

/// One rollout with externally supplied per-token advantages, for the
/// classic clipped surrogate.
#[derive(Debug)]
pub struct PpoRollout<'a> {
    pub view: &'a InstanceView,
    pub trajectory: &'a Trajectory,
    pub advantages: Vec<f64>,
}

/// Classic clipped surrogate: per-trajectory token mean of
/// `min(rho * A_t, clip(rho) * A_t)` with per-token advantages, averaged
/// over rollouts. Advantage estimation is the caller's problem.
pub fn ppo_objective(
    rollouts: &[PpoRollout],
    params: &PolicyParams,
    params_old: &PolicyParams,
    config: &ObjectiveConfig,
) -> Result<ObjectiveEval> {
    config.validate()?;
    if rollouts.is_empty() {
        return Err(Error::Config("objective needs at least one rollout".into()));
    }
    let (clip_lo, clip_hi) = (1.0 - config.eps, 1.0 + config.eps);
    let mut value = 0.0;
    let mut gradient = vec![0.0; FEATURE_DIM];
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let rollout_scale = 1.0 / rollouts.len() as f64;
    for r in rollouts {
        if r.trajectory.is_empty() {
            return Err(Error::Config("rollout contains an empty trajectory".into()));
        }
        if r.advantages.len() != r.trajectory.len() {
            return Err(Error::Dimension(format!(
                "{} advantages for {} tokens",
                r.advantages.len(),
                r.trajectory.len()
            )));
        }
        if r.advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("rollout has non-finite advantages".into()));
        }
        let lp_new = token_logprobs(params, r.view, &r.trajectory.tokens)?;
        let lp_old = token_logprobs(params_old, r.view, &r.trajectory.tokens)?;
        let scale = rollout_scale / r.trajectory.len() as f64;
        tokens += r.trajectory.len();
        // Per-token advantages: run the clip branch per token.
        let mut weights = Vec::with_capacity(r.trajectory.len());
        for ((&ln, &lo), &adv) in lp_new.iter().zip(&lp_old).zip(&r.advantages) {
            let terms = surrogate_terms(adv, &[ln], &[lo], clip_lo, clip_hi);
            clipped += terms.clipped;
            value += scale * terms.values[0];
            weights.push(terms.weights[0] * scale);
        }
        let g_traj = grad_weighted_logprob(params, r.view, &r.trajectory.tokens, &weights)?;
        for d in 0..FEATURE_DIM {
            gradient[d] += g_traj[d];
        }
    }
    let eval = ObjectiveEval {
        value,
        gradient,
        clip_fraction: if tokens == 0 { 0.0 } else { clipped as f64 / tokens as f64 },
        tokens,
    };
    check_finite(&eval)?;
    Ok(eval)
}

/// Mean pointwise KL estimate against a reference policy over every token
/// in the batch (a diagnostic, not an objective term).
pub fn kl_estimate(
    params: &PolicyParams,
    params_ref: &PolicyParams,
    groups: &[RolloutGroup],
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for g in groups {
        for traj in &g.trajectories {
            let lp_new = token_logprobs(params, &g.view, &traj.tokens)?;
            let lp_ref = token_logprobs(params_ref, &g.view, &traj.tokens)?;
            for (&ln, &lr) in lp_new.iter().zip(&lp_ref) {
                total += kl_point(ln, lr);
            }
            tokens += traj.len();
        }
    }
    if tokens == 0 {
        return Ok(0.0);
    }
    Ok(total / tokens as f64)
}
