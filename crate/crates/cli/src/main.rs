//! `lcrl` — command-line front end for the long-context RL pipeline:
//! synthetic data generation, SFT warm-up, curriculum RL training,
//! accuracy and pass@k evaluation, and metrics export.
//!
//! Exit codes: 0 success, 2 configuration error (including usage errors),
//! 3 I/O or malformed-input error, 4 judge transport failure. Failures
//! print a single `error: …` line on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lcrl_core::eval::ExportFormat;
use lcrl_core::Error;

use crate::config::JudgeKind;

#[derive(Parser)]
#[command(name = "lcrl", version, about = "Desk-scale long-context RL pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bound the worker-thread pool (default: one thread per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-context QA dataset.
    GenData {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset file to write (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm-up supervised fine-tuning on gold demonstrations.
    Sft {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint, losses, and config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reinforcement-learning training with the configured objective.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for metrics, checkpoints, and the config echo.
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of the configured
        /// initialization (e.g. an SFT run's checkpoint-final.txt).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Accuracy evaluation with the hybrid rule/judge scorer.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Judge backend, overriding the configuration.
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        /// Report file: one JSON record per instance plus a summary line.
        #[arg(long, default_value = "eval-report.jsonl")]
        out: PathBuf,
    },
    /// Pass@k over repeated stochastic samples.
    Passk {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Judge backend, overriding the configuration.
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        /// Rollouts drawn per instance.
        #[arg(long, default_value_t = 16)]
        num_samples: usize,
        /// Comma-separated k values (default: powers of two up to
        /// num-samples).
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Report file (JSON).
        #[arg(long, default_value = "passk-report.json")]
        out: PathBuf,
    },
    /// Convert a metrics trace (metrics.jsonl) to a columnar file.
    ExportMetrics {
        /// Metrics trace written by train.
        #[arg(long)]
        input: PathBuf,
        /// Columnar file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Tsv,
}

impl From<Format> for ExportFormat {
    fn from(format: Format) -> Self {
        match format {
            Format::Csv => ExportFormat::Csv,
            Format::Tsv => ExportFormat::Tsv,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Data { .. } => 3,
        Error::JudgeTransport(_) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> lcrl_core::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out, seed),
        Command::Sft { config, data, out } => commands::sft(&config, &data, &out, seed),
        Command::Train { config, data, out, init } => {
            commands::train(&config, &data, &out, init.as_deref(), seed)
        }
        Command::Eval { checkpoint, data, config, judge, out } => {
            commands::eval(config.as_deref(), &checkpoint, &data, judge, &out, seed)
        }
        Command::Passk { checkpoint, data, config, judge, num_samples, ks, out } => {
            commands::passk(
                config.as_deref(),
                &checkpoint,
                &data,
                judge,
                num_samples,
                ks,
                &out,
                seed,
            )
        }
        Command::ExportMetrics { input, out, format } => {
            commands::export(&input, &out, format.into())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if workers == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            eprintln!("error: initializing {workers} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
