//! The reinforcement-learning training loop: phased batching, grouped
//! rollouts, reward scoring, advantage normalization, clipped-surrogate
//! updates, and metrics emission.
//!
//! One optimization step samples a batch of instances admitted by the
//! current phase (later phases mix in hard instances revisited from
//! earlier ones), rolls out a group of trajectories per instance under the
//! frozen step-start policy, scores them with the hybrid rule/judge
//! reward, and applies minibatch ascent on the configured objective. All
//! randomness flows through per-purpose derived streams, so a run is
//! reproducible bit-for-bit from its seed. File output goes through the
//! [`TrainSink`] trait; the trainer itself never touches the filesystem.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, ToyCodec};
use crate::curriculum::{retrospective_sample, DifficultyRecord, PhasePlan};
use crate::error::{Error, Result};
use crate::objectives::{
    dapo_objective, dynamic_filter, grpo_objective, kl_estimate, Algorithm, ObjectiveConfig,
    RolloutGroup,
};
use crate::policy::{
    sample_trajectory_with_rng, save_checkpoint, trajectory_entropy, InstanceView, PolicyParams,
    SamplingConfig, FEATURE_DIM,
};
use crate::rewards::{score_trajectory, shape_overlong, JudgeClient, ShapingConfig};
use crate::rng::{self, purpose};

/// Optimizer selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let Self::Adam { beta1, beta2, eps } = self {
            for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                if !(0.0..1.0).contains(b) {
                    return Err(Error::Config(format!("adam {name} {b} outside [0, 1)")));
                }
            }
            if !(*eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("adam eps {eps} must be a positive real")));
            }
        }
        Ok(())
    }
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub sampling: SamplingConfig,
    /// Overlong-output shaping; only valid with the decoupled-clip
    /// objective, which is the path that manages length budgets.
    pub shaping: Option<ShapingConfig>,
    pub plan: PhasePlan,
    /// Instances (groups) sampled per optimization step.
    pub batch_size: usize,
    /// Groups per gradient update; must divide `batch_size`.
    pub mini_batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    /// Optional global step cap below the plan's total budget.
    pub max_steps: Option<usize>,
    /// Batch resampling attempts when dynamic filtering empties a batch.
    pub resample_retries: usize,
    /// Emit a checkpoint every this many steps.
    pub checkpoint_interval: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            sampling: SamplingConfig::default(),
            shaping: None,
            plan: PhasePlan::single(4096, 100),
            batch_size: 16,
            mini_batch_size: 4,
            learning_rate: 1e-2,
            optimizer: OptimizerConfig::default(),
            max_steps: None,
            resample_retries: 10,
            checkpoint_interval: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.sampling.validate()?;
        self.plan.validate()?;
        self.optimizer.validate()?;
        if let Some(shaping) = &self.shaping {
            shaping.validate()?;
            if self.objective.algorithm != Algorithm::Dapo {
                return Err(Error::Config(
                    "length shaping is part of the dapo objective path".into(),
                ));
            }
        }
        if self.objective.algorithm == Algorithm::Ppo {
            return Err(Error::Config(
                "the rollout trainer supports grpo and dapo; ppo needs externally \
                 estimated per-token advantages"
                    .into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.mini_batch_size == 0 || self.batch_size % self.mini_batch_size != 0 {
            return Err(Error::Config(format!(
                "mini_batch_size {} must be a positive divisor of batch_size {}",
                self.mini_batch_size, self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.resample_retries > 100 {
            return Err(Error::Config(format!(
                "resample_retries {} is unreasonably large (max 100)",
                self.resample_retries
            )));
        }
        Ok(())
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Global optimization step, 0-based.
    pub step: usize,
    /// Phase the step ran in, 1-based.
    pub phase: usize,
    /// Mean raw combined reward over every trajectory sampled this step.
    pub mean_reward: f64,
    /// Mean per-step policy entropy (nats) under the step-start policy.
    pub mean_entropy: f64,
    /// Divergence estimate against the phase-start reference policy,
    /// measured after the step's updates.
    pub kl_estimate: f64,
    /// Norm of the summed minibatch objective gradients.
    pub gradient_norm: f64,
    /// Fraction of tokens whose surrogate term was clipped.
    pub clip_fraction: f64,
    pub mean_output_length: f64,
    /// Groups dropped by dynamic filtering (decoupled-clip path only).
    pub groups_filtered: usize,
}

/// Receiver for everything a training run emits. The trainer performs no
/// file IO itself; implementations decide what to persist.
pub trait TrainSink {
    fn on_metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        let _ = record;
        Ok(())
    }
    fn on_checkpoint(&mut self, step: usize, params: &PolicyParams) -> Result<()> {
        let _ = (step, params);
        Ok(())
    }
    /// Instance ids making up the batch a step actually trained on.
    fn on_batch(&mut self, step: usize, instance_ids: &[String]) -> Result<()> {
        let _ = (step, instance_ids);
        Ok(())
    }
    /// Difficulty pool computed at the start of a phase (1-based).
    fn on_difficulty_pool(&mut self, phase: usize, pool: &[DifficultyRecord]) -> Result<()> {
        let _ = (phase, pool);
        Ok(())
    }
    /// Number of instances longer than every phase threshold, reported
    /// once per run.
    fn on_excluded(&mut self, count: usize) -> Result<()> {
        let _ = count;
        Ok(())
    }
}

/// Sink that drops everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl TrainSink for NullSink {}

/// Sink that writes run artifacts under a directory: `metrics.jsonl` (one
/// record per step), `checkpoint-{step:06}.txt`, `difficulty-phase{k}.jsonl`,
/// and `train.log` for run-level notes.
#[derive(Debug)]
pub struct FileSink {
    run_dir: PathBuf,
    metrics: BufWriter<fs::File>,
    log: BufWriter<fs::File>,
}

impl FileSink {
    pub fn create(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let metrics = BufWriter::new(fs::File::create(run_dir.join("metrics.jsonl"))?);
        let log = BufWriter::new(fs::File::create(run_dir.join("train.log"))?);
        Ok(Self { run_dir: run_dir.to_path_buf(), metrics, log })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.log.flush()?;
        Ok(())
    }
}

impl TrainSink for FileSink {
    fn on_metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("serializing metrics: {e}")))?;
        writeln!(self.metrics, "{line}")?;
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, params: &PolicyParams) -> Result<()> {
        save_checkpoint(&self.run_dir.join(format!("checkpoint-{step:06}.txt")), params)
    }

    fn on_batch(&mut self, step: usize, instance_ids: &[String]) -> Result<()> {
        writeln!(self.log, "step {step} batch: {}", instance_ids.join(" "))?;
        Ok(())
    }

    fn on_difficulty_pool(&mut self, phase: usize, pool: &[DifficultyRecord]) -> Result<()> {
        let path = self.run_dir.join(format!("difficulty-phase{phase}.jsonl"));
        let mut w = BufWriter::new(fs::File::create(path)?);
        for record in pool {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::Config(format!("serializing difficulty: {e}")))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    fn on_excluded(&mut self, count: usize) -> Result<()> {
        if count > 0 {
            writeln!(self.log, "warning: {count} instances exceed every phase threshold")?;
        }
        Ok(())
    }
}

impl Drop for FileSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Roll out `group_size` trajectories per instance under `params` and
/// score them. Each (instance, rollout) pair draws from its own derived
/// RNG stream, so results are independent of thread scheduling.
pub fn collect_rollouts(
    codec: &ToyCodec,
    instances: &[&Instance],
    params: &PolicyParams,
    sampling: &SamplingConfig,
    judge: &JudgeClient,
    group_size: usize,
    seed: u64,
    tags: &[u64],
) -> Result<Vec<RolloutGroup>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(slot, instance)| -> Result<RolloutGroup> {
            let view = InstanceView::build(codec, instance)?;
            let mut trajectories = Vec::with_capacity(group_size);
            let mut rewards = Vec::with_capacity(group_size);
            for r in 0..group_size {
                let mut stream_tags = tags.to_vec();
                stream_tags.push(slot as u64);
                stream_tags.push(r as u64);
                let mut rng = rng::stream(seed, &stream_tags);
                let traj = sample_trajectory_with_rng(params, &view, sampling, &mut rng)?;
                let outcome =
                    score_trajectory(codec, &instance.question, &traj, &instance.gold_answer, judge)?;
                rewards.push(f64::from(outcome.combined));
                trajectories.push(traj);
            }
            Ok(RolloutGroup::new(instance.id.clone(), view, trajectories, rewards))
        })
        .collect()
}

/// First-order ascent state.
enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64, m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    fn new(config: &OptimizerConfig) -> Self {
        match *config {
            OptimizerConfig::Sgd => Self::Sgd,
            OptimizerConfig::Adam { beta1, beta2, eps } => Self::Adam {
                beta1,
                beta2,
                eps,
                m: vec![0.0; FEATURE_DIM],
                v: vec![0.0; FEATURE_DIM],
                t: 0,
            },
        }
    }

    /// One ascent step along `gradient`.
    fn step(&mut self, params: &mut PolicyParams, gradient: &[f64], lr: f64) {
        match self {
            Self::Sgd => {
                for d in 0..FEATURE_DIM {
                    params.weights[d] += lr * gradient[d];
                }
            }
            Self::Adam { beta1, beta2, eps, m, v, t } => {
                *t += 1;
                let b1 = *beta1;
                let b2 = *beta2;
                for d in 0..FEATURE_DIM {
                    m[d] = b1 * m[d] + (1.0 - b1) * gradient[d];
                    v[d] = b2 * v[d] + (1.0 - b2) * gradient[d] * gradient[d];
                    let m_hat = m[d] / (1.0 - b1.powi(*t as i32));
                    let v_hat = v[d] / (1.0 - b2.powi(*t as i32));
                    params.weights[d] += lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

struct Buckets<'a> {
    by_phase: Vec<Vec<&'a Instance>>,
    excluded: usize,
    lookup: HashMap<&'a str, &'a Instance>,
}

fn bucket_instances<'a>(
    codec: &ToyCodec,
    instances: &'a [Instance],
    plan: &PhasePlan,
) -> Result<Buckets<'a>> {
    let mut by_phase: Vec<Vec<&Instance>> = vec![Vec::new(); plan.num_phases()];
    let mut excluded = 0usize;
    let mut lookup = HashMap::new();
    for instance in instances {
        let input_length =
            codec.token_count(&instance.question)? + codec.token_count(&instance.context)?;
        match plan.assign_phase(input_length) {
            Some(k) => by_phase[k].push(instance),
            None => excluded += 1,
        }
        lookup.insert(instance.id.as_str(), instance);
    }
    for (k, bucket) in by_phase.iter().enumerate() {
        if bucket.is_empty() {
            return Err(Error::Config(format!(
                "phase {} (lengths up to {}) has no instances",
                k + 1,
                plan.thresholds[k]
            )));
        }
    }
    Ok(Buckets { by_phase, excluded, lookup })
}

/// Mean-reward difficulty pool over every instance of phases before
/// `phase` (0-based), rolled out under the current policy.
fn refresh_difficulty_pool(
    codec: &ToyCodec,
    buckets: &Buckets,
    phase: usize,
    params: &PolicyParams,
    config: &TrainConfig,
    judge: &JudgeClient,
) -> Result<Vec<DifficultyRecord>> {
    let earlier: Vec<&Instance> =
        buckets.by_phase[..phase].iter().flat_map(|b| b.iter().copied()).collect();
    let groups = collect_rollouts(
        codec,
        &earlier,
        params,
        &config.sampling,
        judge,
        config.objective.group_size,
        config.seed,
        &[purpose::DIFFICULTY, phase as u64],
    )?;
    Ok(groups
        .iter()
        .map(|g| DifficultyRecord {
            instance_id: g.instance_id.clone(),
            mean_reward: g.rewards.iter().sum::<f64>() / g.rewards.len() as f64,
        })
        .collect())
}

/// Step-level rollout diagnostics, measured before any filtering.
struct BatchStats {
    mean_reward: f64,
    mean_entropy: f64,
    mean_output_length: f64,
}

fn batch_stats(groups: &[RolloutGroup], params: &PolicyParams) -> Result<BatchStats> {
    let (mut reward_sum, mut entropy_sum, mut len_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
    for g in groups {
        for (traj, &r) in g.trajectories.iter().zip(&g.rewards) {
            reward_sum += r;
            entropy_sum += trajectory_entropy(params, &g.view, &traj.tokens)?;
            len_sum += traj.len() as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(BatchStats { mean_reward: 0.0, mean_entropy: 0.0, mean_output_length: 0.0 });
    }
    let n = n as f64;
    Ok(BatchStats {
        mean_reward: reward_sum / n,
        mean_entropy: entropy_sum / n,
        mean_output_length: len_sum / n,
    })
}

/// Run reinforcement-learning training in place. `params` must match the
/// codec the instances are encoded with.
pub fn train_rl(
    codec: &ToyCodec,
    instances: &[Instance],
    params: &mut PolicyParams,
    config: &TrainConfig,
    judge: &JudgeClient,
    sink: &mut dyn TrainSink,
) -> Result<()> {
    config.validate()?;
    params.validate()?;
    if params.codec_hash != codec.hash() {
        return Err(Error::Config(
            "policy was built against a different vocabulary than the dataset".into(),
        ));
    }
    let buckets = bucket_instances(codec, instances, &config.plan)?;
    sink.on_excluded(buckets.excluded)?;

    let total_steps = config.plan.total_steps().min(config.max_steps.unwrap_or(usize::MAX));
    let mut optimizer = Optimizer::new(&config.optimizer);
    let mut reference = params.clone();
    let mut pool: Vec<DifficultyRecord> = Vec::new();
    let mut current_phase: Option<usize> = None;

    for step in 0..total_steps {
        let phase = config.plan.phase_of_step(step);
        if current_phase != Some(phase) {
            current_phase = Some(phase);
            reference = params.clone();
            if phase > 0 {
                pool = refresh_difficulty_pool(codec, &buckets, phase, params, config, judge)?;
                sink.on_difficulty_pool(phase + 1, &pool)?;
            }
        }

        let n_retro = if phase > 0 && !pool.is_empty() {
            (config.batch_size as f64 * config.plan.retro_fraction).floor() as usize
        } else {
            0
        };

        // Dynamic-sampling loop: the decoupled-clip path redraws the whole
        // batch while filtering leaves nothing to learn from, and the step
        // fails once the retry budget is spent. Diagnostics are measured
        // pre-filter, on the batch the step actually trains on.
        let groups: Vec<RolloutGroup>;
        let mut batch_ids: Vec<String>;
        let dropped: usize;
        let mut stats: BatchStats;
        let mut attempt = 0usize;
        loop {
            let bucket = &buckets.by_phase[phase];
            let mut batch_rng =
                rng::stream(config.seed, &[purpose::BATCH, step as u64, attempt as u64]);
            let retro_ids = retrospective_sample(
                &pool,
                n_retro,
                config.seed,
                &[purpose::RETRO, step as u64, attempt as u64],
            )?;
            let mut batch: Vec<&Instance> = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size - retro_ids.len() {
                batch.push(bucket[batch_rng.gen_range(0..bucket.len())]);
            }
            for id in &retro_ids {
                batch.push(buckets.lookup.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Config(format!("difficulty pool references unknown instance {id}"))
                })?);
            }
            batch_ids = batch.iter().map(|i| i.id.clone()).collect::<Vec<String>>();

            let mut sampled = collect_rollouts(
                codec,
                &batch,
                params,
                &config.sampling,
                judge,
                config.objective.group_size,
                config.seed,
                &[purpose::ROLLOUT, step as u64, attempt as u64],
            )?;

            match config.objective.algorithm {
                Algorithm::Grpo => {
                    for g in &mut sampled {
                        g.normalize_from_rewards()?;
                    }
                    stats = batch_stats(&sampled, params)?;
                    groups = sampled;
                    dropped = 0;
                    break;
                }
                Algorithm::Dapo => {
                    if let Some(shaping) = &config.shaping {
                        for g in &mut sampled {
                            g.shaped_rewards = g
                                .rewards
                                .iter()
                                .zip(&g.trajectories)
                                .map(|(&r, t)| shape_overlong(r, t.len(), shaping))
                                .collect::<Result<Vec<f64>>>()?;
                        }
                    }
                    stats = batch_stats(&sampled, params)?;
                    let (mut kept, n_dropped) = dynamic_filter(sampled);
                    for g in &mut kept {
                        g.normalize_from_shaped()?;
                    }
                    if !kept.is_empty() {
                        groups = kept;
                        dropped = n_dropped;
                        break;
                    }
                    if attempt == config.resample_retries {
                        return Err(Error::Config(format!(
                            "dynamic filtering discarded every rollout group at step {step} \
                             across {} batches; the reward signal is degenerate on this data",
                            attempt + 1
                        )));
                    }
                    attempt += 1;
                }
                Algorithm::Ppo => unreachable!("rejected by validate"),
            }
        }

        let params_old = params.clone();

        let mut grad_sum = vec![0.0; FEATURE_DIM];
        let (mut clipped_weighted, mut tokens_total) = (0.0, 0usize);
        for chunk in groups.chunks(config.mini_batch_size) {
            let eval = match config.objective.algorithm {
                Algorithm::Grpo => grpo_objective(
                    chunk,
                    params,
                    &params_old,
                    Some(&reference),
                    &config.objective,
                )?,
                Algorithm::Dapo => {
                    dapo_objective(chunk, params, &params_old, &config.objective)?
                }
                Algorithm::Ppo => unreachable!("rejected by validate"),
            };
            optimizer.step(params, &eval.gradient, config.learning_rate);
            for d in 0..FEATURE_DIM {
                grad_sum[d] += eval.gradient[d];
            }
            clipped_weighted += eval.clip_fraction * eval.tokens as f64;
            tokens_total += eval.tokens;
        }

        let record = MetricsRecord {
            step,
            phase: phase + 1,
            mean_reward: stats.mean_reward,
            mean_entropy: stats.mean_entropy,
            kl_estimate: kl_estimate(params, &reference, &groups)?,
            gradient_norm: grad_sum.iter().map(|g| g * g).sum::<f64>().sqrt(),
            clip_fraction: if tokens_total == 0 {
                0.0
            } else {
                clipped_weighted / tokens_total as f64
            },
            mean_output_length: stats.mean_output_length,
            groups_filtered: dropped,
        };
        sink.on_batch(step, &batch_ids)?;
        sink.on_metrics(&record)?;
        if let Some(k) = config.checkpoint_interval {
            if (step + 1) % k == 0 {
                sink.on_checkpoint(step, params)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};

    fn setup(
        num_instances: usize,
        length_range: (usize, usize),
    ) -> (ToyCodec, Vec<Instance>, PolicyParams) {
        let synth = SynthConfig {
            num_instances,
            num_keys: 5,
            num_values: 5,
            length_range,
            distractor_rate: 0.0,
            seed: 21,
        };
        let instances = generate_synthetic(&synth).unwrap();
        let codec = ToyCodec::for_synth(&synth).unwrap();
        let params = PolicyParams::uniform(&codec);
        (codec, instances, params)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            objective: ObjectiveConfig { group_size: 4, ..Default::default() },
            sampling: SamplingConfig { max_output_len: 3, ..Default::default() },
            plan: PhasePlan::single(64, 4),
            batch_size: 4,
            mini_batch_size: 2,
            learning_rate: 0.05,
            seed: 9,
            ..Default::default()
        }
    }

    #[derive(Default)]
    struct RecordingSink {
        metrics: Vec<MetricsRecord>,
        batches: Vec<(usize, Vec<String>)>,
        checkpoints: Vec<usize>,
        pools: Vec<(usize, Vec<DifficultyRecord>)>,
        excluded: Option<usize>,
    }

    impl TrainSink for RecordingSink {
        fn on_metrics(&mut self, record: &MetricsRecord) -> Result<()> {
            self.metrics.push(record.clone());
            Ok(())
        }
        fn on_checkpoint(&mut self, step: usize, _params: &PolicyParams) -> Result<()> {
            self.checkpoints.push(step);
            Ok(())
        }
        fn on_batch(&mut self, step: usize, ids: &[String]) -> Result<()> {
            self.batches.push((step, ids.to_vec()));
            Ok(())
        }
        fn on_difficulty_pool(&mut self, phase: usize, pool: &[DifficultyRecord]) -> Result<()> {
            self.pools.push((phase, pool.to_vec()));
            Ok(())
        }
        fn on_excluded(&mut self, count: usize) -> Result<()> {
            self.excluded = Some(count);
            Ok(())
        }
    }

    #[test]
    fn test_run_is_deterministic_for_fixed_seed() {
        let (codec, instances, init) = setup(10, (7, 15));
        let config = quick_config();
        let judge = JudgeClient::mock_equality();
        let mut a = init.clone();
        let mut sink_a = RecordingSink::default();
        train_rl(&codec, &instances, &mut a, &config, &judge, &mut sink_a).unwrap();
        let judge = JudgeClient::mock_equality();
        let mut b = init.clone();
        let mut sink_b = RecordingSink::default();
        train_rl(&codec, &instances, &mut b, &config, &judge, &mut sink_b).unwrap();
        assert_eq!(a, b);
        assert_eq!(sink_a.metrics, sink_b.metrics);
        assert_eq!(sink_a.batches, sink_b.batches);
        assert_eq!(sink_a.metrics.len(), 4);
    }

    #[test]
    fn test_zero_learning_rate_is_stationary() {
        let (codec, instances, init) = setup(8, (7, 15));
        let mut config = quick_config();
        config.learning_rate = 0.0;
        let judge = JudgeClient::mock_equality();
        let mut params = init.clone();
        train_rl(&codec, &instances, &mut params, &config, &judge, &mut NullSink).unwrap();
        assert_eq!(params, init);
    }

    #[test]
    fn test_max_steps_zero_does_nothing() {
        let (codec, instances, init) = setup(8, (7, 15));
        let mut config = quick_config();
        config.max_steps = Some(0);
        let judge = JudgeClient::mock_equality();
        let mut params = init.clone();
        let mut sink = RecordingSink::default();
        train_rl(&codec, &instances, &mut params, &config, &judge, &mut sink).unwrap();
        assert_eq!(params, init);
        assert!(sink.metrics.is_empty());
        assert_eq!(sink.excluded, Some(0));
    }

    #[test]
    fn test_two_phase_batches_mix_in_earlier_instances() {
        // Lengths 9..=25 split at 15: phase 1 trains on short instances,
        // phase 2 on long ones plus revisited short ones.
        let (codec, instances, init) = setup(24, (9, 25));
        let plan = PhasePlan {
            thresholds: vec![15, 25],
            steps_per_phase: vec![2, 3],
            retro_fraction: 0.5,
        };
        let mut config = quick_config();
        config.plan = plan.clone();
        let judge = JudgeClient::mock_equality();
        let mut params = init;
        let mut sink = RecordingSink::default();
        train_rl(&codec, &instances, &mut params, &config, &judge, &mut sink).unwrap();

        let short_ids: std::collections::HashSet<&str> = instances
            .iter()
            .filter(|i| i.input_length <= 15)
            .map(|i| i.id.as_str())
            .collect();
        assert!(!short_ids.is_empty() && short_ids.len() < instances.len());

        assert_eq!(sink.pools.len(), 1, "one difficulty pool, at the phase-2 boundary");
        assert_eq!(sink.pools[0].0, 2);
        assert_eq!(sink.pools[0].1.len(), short_ids.len());

        for (step, ids) in &sink.batches {
            let n_short = ids.iter().filter(|id| short_ids.contains(id.as_str())).count();
            if *step < 2 {
                assert_eq!(n_short, ids.len(), "phase 1 trains only on short instances");
            } else {
                // floor(4 * 0.5) = 2 retrospective slots from earlier phases.
                assert_eq!(ids.len(), 4);
                assert!(n_short >= 2, "step {step} mixed in {n_short} short instances");
            }
        }
        for m in &sink.metrics {
            assert_eq!(m.phase, if m.step < 2 { 1 } else { 2 });
        }
    }

    #[test]
    fn test_excluded_instances_are_reported() {
        let (codec, instances, init) = setup(12, (9, 25));
        let mut config = quick_config();
        config.plan = PhasePlan::single(15, 2);
        let judge = JudgeClient::mock_equality();
        let mut params = init;
        let mut sink = RecordingSink::default();
        train_rl(&codec, &instances, &mut params, &config, &judge, &mut sink).unwrap();
        let expected = instances.iter().filter(|i| i.input_length > 15).count();
        assert!(expected > 0);
        assert_eq!(sink.excluded, Some(expected));
    }

    #[test]
    fn test_dapo_errors_when_every_resample_is_degenerate() {
        // Greedy decoding repeats one trajectory per group, so every group
        // has zero reward variance, every resample attempt filters to
        // nothing, and the step must fail once the retry budget is spent.
        let (codec, instances, init) = setup(4, (7, 9));
        let mut config = quick_config();
        config.objective.algorithm = Algorithm::Dapo;
        config.sampling.greedy = true;
        config.resample_retries = 2;
        let judge = JudgeClient::mock_equality();
        let mut params = init;
        let err = train_rl(&codec, &instances, &mut params, &config, &judge, &mut NullSink)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("3 batches"), "{err}");
    }

    #[test]
    fn test_empty_phase_bucket_is_an_error() {
        let (codec, instances, init) = setup(8, (9, 15));
        let mut config = quick_config();
        // No instance is shorter than 5 tokens, so phase 1 is empty.
        config.plan = PhasePlan {
            thresholds: vec![5, 20],
            steps_per_phase: vec![2, 2],
            retro_fraction: 0.0,
        };
        let judge = JudgeClient::mock_equality();
        let mut params = init;
        let err =
            train_rl(&codec, &instances, &mut params, &config, &judge, &mut NullSink).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn test_config_rejections() {
        let base = quick_config();
        let mut c = base.clone();
        c.objective.algorithm = Algorithm::Ppo;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.shaping = Some(ShapingConfig::with_default_cache(100));
        assert!(c.validate().is_err(), "shaping without dapo must be rejected");
        c.objective.algorithm = Algorithm::Dapo;
        assert!(c.validate().is_ok());

        let mut c = base.clone();
        c.mini_batch_size = 3;
        assert!(c.validate().is_err(), "3 does not divide 4");

        let mut c = base.clone();
        c.resample_retries = 101;
        assert!(c.validate().is_err());

        let mut c = base;
        c.optimizer = OptimizerConfig::Adam { beta1: 1.0, beta2: 0.999, eps: 1e-8 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn test_dapo_path_runs_with_shaping_and_filtering() {
        let (codec, instances, init) = setup(10, (7, 15));
        let mut config = quick_config();
        config.objective.algorithm = Algorithm::Dapo;
        config.shaping = Some(ShapingConfig { l_max: 3, l_cache: 1 });
        let judge = JudgeClient::mock_equality();
        let mut params = init;
        let mut sink = RecordingSink::default();
        train_rl(&codec, &instances, &mut params, &config, &judge, &mut sink).unwrap();
        assert_eq!(sink.metrics.len(), 4);
        // Shaping can only lower rewards, never raise them above the rule cap.
        for m in &sink.metrics {
            assert!(m.mean_reward <= 1.0 && m.mean_reward >= 0.0);
        }
    }

    #[test]
    fn test_sgd_and_checkpoint_interval() {
        let (codec, instances, init) = setup(8, (7, 15));
        let mut config = quick_config();
        config.optimizer = OptimizerConfig::Sgd;
        config.checkpoint_interval = Some(2);
        let judge = JudgeClient::mock_equality();
        let mut params = init;
        let mut sink = RecordingSink::default();
        train_rl(&codec, &instances, &mut params, &config, &judge, &mut sink).unwrap();
        assert_eq!(sink.checkpoints, vec![1, 3]);
    }

    #[test]
    fn test_collect_rollouts_deterministic_and_scored() {
        let (codec, instances, params) = setup(6, (7, 15));
        let judge = JudgeClient::mock_equality();
        let refs: Vec<&Instance> = instances.iter().collect();
        let sampling = SamplingConfig { max_output_len: 3, ..Default::default() };
        let a = collect_rollouts(&codec, &refs, &params, &sampling, &judge, 4, 3, &[7]).unwrap();
        let b = collect_rollouts(&codec, &refs, &params, &sampling, &judge, 4, 3, &[7]).unwrap();
        assert_eq!(a.len(), 6);
        for (ga, gb) in a.iter().zip(&b) {
            assert_eq!(ga.trajectories, gb.trajectories);
            assert_eq!(ga.rewards, gb.rewards);
            assert_eq!(ga.trajectories.len(), 4);
            for &r in &ga.rewards {
                assert!(r == 0.0 || r == 1.0);
            }
        }
        // Different tags give different rollouts.
        let c = collect_rollouts(&codec, &refs, &params, &sampling, &judge, 4, 3, &[8]).unwrap();
        assert_ne!(
            a.iter().map(|g| &g.trajectories).collect::<Vec<_>>(),
            c.iter().map(|g| &g.trajectories).collect::<Vec<_>>()
        );
    }

    #[test]
    fn test_codec_mismatch_rejected() {
        let (codec, instances, _params) = setup(6, (7, 15));
        let other = ToyCodec::from_texts(["zz yy xx"]).unwrap();
        let mut params = PolicyParams::uniform(&other);
        let judge = JudgeClient::mock_equality();
        let err = train_rl(
            &codec,
            &instances,
            &mut params,
            &quick_config(),
            &judge,
            &mut NullSink,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn test_file_sink_writes_run_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let (codec, instances, init) = setup(8, (7, 15));
        let mut config = quick_config();
        config.checkpoint_interval = Some(2);
        let judge = JudgeClient::mock_equality();
        let mut params = init;
        let mut sink = FileSink::create(&run_dir).unwrap();
        train_rl(&codec, &instances, &mut params, &config, &judge, &mut sink).unwrap();
        sink.flush().unwrap();
        let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        let first: MetricsRecord = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
        assert!(run_dir.join("checkpoint-000001.txt").exists());
        assert!(run_dir.join("checkpoint-000003.txt").exists());
        assert!(run_dir.join("train.log").exists());
    }
}
