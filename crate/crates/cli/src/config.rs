//! Run configuration: one TOML file describing data generation, policy
//! initialization, SFT warm-up, RL training, evaluation sampling, and the
//! judge backend. A single top-level seed fans out to every nested
//! component, so a run has exactly one reproducibility knob, and the
//! resolved values are echoed into the run's output directory.
//!
//! Judge credentials are deliberately absent: the http backend reads
//! `JUDGE_BASE_URL`, `JUDGE_API_KEY`, and `JUDGE_MODEL` from the
//! environment, never from this file.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lcrl_core::corpus::SynthConfig;
use lcrl_core::policy::SamplingConfig;
use lcrl_core::rewards::judge::JudgeConfig;
use lcrl_core::sft::SftConfig;
use lcrl_core::trainer::TrainConfig;
use lcrl_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// How policy weights start when no checkpoint is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyInit {
    /// All weights zero.
    Uniform,
    /// Weight on the context-count feature, concentrating exploration on
    /// tokens that appear in the context.
    ContextPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySection {
    pub init: PolicyInit,
    /// Context-count weight used by the `context-prior` initialization.
    pub context_prior_strength: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { init: PolicyInit::Uniform, context_prior_strength: 8.0 }
    }
}

/// Which judge implementation backs the reward system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    /// Deterministic offline judge (normalized string equality).
    Mock,
    /// OpenAI-compatible chat-completions endpoint configured through the
    /// `JUDGE_*` environment variables.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeSection {
    pub backend: JudgeKind,
    pub cache: bool,
    /// Optional persistent verdict-cache file.
    pub cache_path: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for JudgeSection {
    fn default() -> Self {
        let base = JudgeConfig::default();
        Self {
            backend: JudgeKind::Mock,
            cache: base.cache,
            cache_path: base.cache_path,
            timeout_secs: base.timeout_secs,
            max_retries: base.max_retries,
            backoff_ms: base.backoff_ms,
        }
    }
}

impl JudgeSection {
    pub fn judge_config(&self) -> JudgeConfig {
        JudgeConfig {
            cache: self.cache,
            cache_path: self.cache_path.clone(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            backoff_ms: self.backoff_ms,
        }
    }
}

/// Everything a run needs, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single seed fanned out to data generation, SFT, training, and
    /// evaluation; `--seed` on the command line takes precedence.
    pub seed: u64,
    pub data: SynthConfig,
    pub policy: PolicySection,
    pub sft: SftConfig,
    pub train: TrainConfig,
    /// Sampling used by accuracy and pass@k evaluation.
    pub eval: SamplingConfig,
    pub judge: JudgeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig::default(),
            policy: PolicySection::default(),
            sft: SftConfig::default(),
            train: TrainConfig::default(),
            eval: SamplingConfig { temperature: 0.7, top_p: 0.95, ..SamplingConfig::default() },
            judge: JudgeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))
    }

    /// Apply the seed override, fan the effective seed out to every nested
    /// component, and validate everything. Commands run only resolved
    /// configurations, so an invalid file is rejected before any output
    /// exists.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(seed) = seed_override {
            self.seed = seed;
        }
        self.data.seed = self.seed;
        self.sft.seed = self.seed;
        self.train.seed = self.seed;
        self.train.sampling.seed = self.seed;
        self.eval.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.sft.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if !self.policy.context_prior_strength.is_finite() {
            return Err(Error::Config(format!(
                "context_prior_strength {} must be finite",
                self.policy.context_prior_strength
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Write the resolved values next to the run's other artifacts.
    pub fn echo(&self, run_dir: &Path) -> Result<()> {
        fs::write(run_dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}
