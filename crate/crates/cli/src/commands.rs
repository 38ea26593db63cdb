//! Subcommand implementations. Every command parses and validates its
//! full configuration and loads all inputs before creating any output
//! file or directory, so a rejected invocation leaves nothing behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use lcrl_core::corpus::{generate_synthetic, load_dataset, save_dataset, ToyCodec};
use lcrl_core::eval::{
    evaluate_accuracy, evaluate_pass_at_k, export_metrics, write_accuracy_report, write_report,
    ExportFormat,
};
use lcrl_core::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use lcrl_core::rewards::judge::{HttpJudge, JudgeBackend, MockJudge};
use lcrl_core::rewards::JudgeClient;
use lcrl_core::sft::{train_sft, Demonstration};
use lcrl_core::trainer::{train_rl, FileSink, MetricsRecord, TrainSink};
use lcrl_core::{Error, Result};

use crate::config::{JudgeKind, PolicyInit, RunConfig};

fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    match path {
        Some(path) => RunConfig::load(path)?.resolve(seed),
        None => RunConfig::default().resolve(seed),
    }
}

fn init_policy(config: &RunConfig, codec: &ToyCodec) -> PolicyParams {
    match config.policy.init {
        PolicyInit::Uniform => PolicyParams::uniform(codec),
        PolicyInit::ContextPrior => {
            PolicyParams::context_prior(codec, config.policy.context_prior_strength)
        }
    }
}

/// Load a checkpoint and make sure it matches the dataset's vocabulary
/// before any rollout spends time on it.
fn load_matching_checkpoint(path: &Path, codec: &ToyCodec) -> Result<PolicyParams> {
    let params = load_checkpoint(path)?;
    check_codec(&params, codec)?;
    Ok(params)
}

fn check_codec(params: &PolicyParams, codec: &ToyCodec) -> Result<()> {
    if params.codec_hash != codec.hash() {
        return Err(Error::Config(
            "policy was built against a different vocabulary than the dataset".into(),
        ));
    }
    params.validate()
}

fn build_judge(kind: JudgeKind, config: &RunConfig) -> Result<JudgeClient> {
    let judge_config = config.judge.judge_config();
    let backend = match kind {
        JudgeKind::Mock => JudgeBackend::Mock(MockJudge::new()),
        JudgeKind::Http => JudgeBackend::Http(HttpJudge::from_env(&judge_config)?),
    };
    JudgeClient::new(backend, &judge_config)
}

pub fn gen_data(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_run_config(Some(config_path), seed)?;
    let instances = generate_synthetic(&config.data)?;
    save_dataset(out, &instances)?;
    println!("wrote {} instances to {}", instances.len(), out.display());
    Ok(())
}

pub fn sft(config_path: &Path, data: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_run_config(Some(config_path), seed)?;
    let (codec, instances) = load_dataset(data)?;
    let demos = instances
        .iter()
        .map(|inst| Demonstration::from_instance(&codec, inst))
        .collect::<Result<Vec<_>>>()?;
    let mut params = init_policy(&config, &codec);

    fs::create_dir_all(out_dir)?;
    config.echo(out_dir)?;
    let losses = train_sft(&mut params, &demos, &config.sft)?;
    save_checkpoint(&out_dir.join("checkpoint-final.txt"), &params)?;
    let mut w = BufWriter::new(fs::File::create(out_dir.join("sft-losses.jsonl"))?);
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(w, "{{\"epoch\":{},\"loss\":{}}}", epoch + 1, loss)?;
    }
    w.flush()?;

    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "sft complete: {} epochs over {} demonstrations; final loss {:.6}; run dir {}",
        losses.len(),
        demos.len(),
        final_loss,
        out_dir.display()
    );
    Ok(())
}

/// File sink plus enough bookkeeping to print a closing summary.
struct TrackingSink {
    inner: FileSink,
    steps: usize,
    last: Option<MetricsRecord>,
}

impl TrainSink for TrackingSink {
    fn on_metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        self.steps += 1;
        self.last = Some(record.clone());
        self.inner.on_metrics(record)
    }

    fn on_checkpoint(&mut self, step: usize, params: &PolicyParams) -> Result<()> {
        self.inner.on_checkpoint(step, params)
    }

    fn on_batch(&mut self, step: usize, instance_ids: &[String]) -> Result<()> {
        self.inner.on_batch(step, instance_ids)
    }

    fn on_difficulty_pool(
        &mut self,
        phase: usize,
        pool: &[lcrl_core::curriculum::DifficultyRecord],
    ) -> Result<()> {
        self.inner.on_difficulty_pool(phase, pool)
    }

    fn on_excluded(&mut self, count: usize) -> Result<()> {
        if count > 0 {
            eprintln!("warning: {count} instances are longer than every phase threshold");
        }
        self.inner.on_excluded(count)
    }
}

pub fn train(
    config_path: &Path,
    data: &Path,
    out_dir: &Path,
    init: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_run_config(Some(config_path), seed)?;
    let (codec, instances) = load_dataset(data)?;
    let mut params = match init {
        Some(path) => load_matching_checkpoint(path, &codec)?,
        None => init_policy(&config, &codec),
    };
    let judge = build_judge(config.judge.backend, &config)?;

    fs::create_dir_all(out_dir)?;
    config.echo(out_dir)?;
    let mut sink =
        TrackingSink { inner: FileSink::create(out_dir)?, steps: 0, last: None };
    train_rl(&codec, &instances, &mut params, &config.train, &judge, &mut sink)?;
    sink.inner.flush()?;
    save_checkpoint(&out_dir.join("checkpoint-final.txt"), &params)?;

    match sink.last {
        Some(record) => println!(
            "training complete: {} steps; final mean reward {:.4}; run dir {}",
            sink.steps,
            record.mean_reward,
            out_dir.display()
        ),
        None => println!("training complete: 0 steps; run dir {}", out_dir.display()),
    }
    Ok(())
}

pub fn eval(
    config_path: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    judge_override: Option<JudgeKind>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_run_config(config_path, seed)?;
    let (codec, instances) = load_dataset(data)?;
    let params = load_matching_checkpoint(checkpoint, &codec)?;
    let judge = build_judge(judge_override.unwrap_or(config.judge.backend), &config)?;

    let report =
        evaluate_accuracy(&codec, &instances, &params, &config.eval, &judge, config.seed)?;
    write_accuracy_report(out, &report)?;
    println!(
        "accuracy {:.4} over {} instances; report {}",
        report.accuracy,
        report.num_instances,
        out.display()
    );
    Ok(())
}

/// Powers of two up to the sample count, then the sample count itself.
fn default_ks(num_samples: usize) -> Vec<usize> {
    let mut ks = Vec::new();
    let mut k = 1usize;
    while k < num_samples {
        ks.push(k);
        k *= 2;
    }
    ks.push(num_samples);
    ks
}

#[allow(clippy::too_many_arguments)]
pub fn passk(
    config_path: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    judge_override: Option<JudgeKind>,
    num_samples: usize,
    ks: Option<Vec<usize>>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_run_config(config_path, seed)?;
    let (codec, instances) = load_dataset(data)?;
    let params = load_matching_checkpoint(checkpoint, &codec)?;
    let judge = build_judge(judge_override.unwrap_or(config.judge.backend), &config)?;
    let ks = ks.unwrap_or_else(|| default_ks(num_samples));

    let report = evaluate_pass_at_k(
        &codec,
        &instances,
        &params,
        &config.eval,
        &judge,
        num_samples,
        &ks,
        config.seed,
    )?;
    write_report(out, &report)?;
    let summary: Vec<String> =
        report.entries.iter().map(|(k, p)| format!("pass@{k} {p:.4}")).collect();
    println!(
        "{} over {} instances x {} samples; report {}",
        summary.join(", "),
        report.num_instances,
        report.num_samples,
        out.display()
    );
    Ok(())
}

pub fn export(input: &Path, out: &Path, format: ExportFormat) -> Result<()> {
    let rows = export_metrics(input, out, format)?;
    println!("exported {rows} rows to {}", out.display());
    Ok(())
}
