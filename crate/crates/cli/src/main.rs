//! `deta`: synthetic-data generation, two-stage training, evaluation, and
//! embedding export for graph-based discrete-time survival prediction under
//! domain shift.
//!
//! Exit codes: 0 success, 1 training/validation failure, 2 I/O or config
//! error. Set `DETA_LOG` (error/warn/info/debug) for logging verbosity.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::*;
use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: String) -> Self {
        CliError { code: 2, message }
    }
    fn io(message: String) -> Self {
        CliError { code: 2, message }
    }
    fn run(message: String) -> Self {
        CliError { code: 1, message }
    }
}

#[derive(Parser)]
#[command(name = "deta", version, about = "Graph domain-adaptive survival prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired source/target synthetic dataset.
    Generate {
        /// TOML run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed override for the whole run.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train the dual-branch encoder on the labeled source domain.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Source dataset (JSON Lines).
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Domain-adapt a pretrained checkpoint against an unlabeled target.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint: C-index, KM curves, log-rank test.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export per-graph embeddings with domain tags and predicted bins.
    ExportEmbeddings {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = RunConfig::resolve(config.as_deref(), seed)?;
            cmd_generate(&cfg, &out)
        }
        Command::Pretrain {
            config,
            source,
            out,
            seed,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), seed)?;
            cmd_pretrain(&cfg, require_file(&source)?, &out)
        }
        Command::Adapt {
            config,
            source,
            target,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), seed)?;
            cmd_adapt(
                &cfg,
                require_file(&source)?,
                require_file(&target)?,
                require_file(&checkpoint)?,
                &out,
            )
        }
        Command::Eval {
            config,
            checkpoint,
            source,
            target,
            out,
            seed,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), seed)?;
            let src = source.as_ref().map(require_file).transpose()?;
            let tgt = target.as_ref().map(require_file).transpose()?;
            cmd_eval(&cfg, require_file(&checkpoint)?, src, tgt, &out)
        }
        Command::ExportEmbeddings {
            config,
            checkpoint,
            source,
            target,
            out,
            seed,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), seed)?;
            let src = source.as_ref().map(require_file).transpose()?;
            let tgt = target.as_ref().map(require_file).transpose()?;
            cmd_export_embeddings(&cfg, require_file(&checkpoint)?, src, tgt, &out)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DETA_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.code);
        }
    }
}
