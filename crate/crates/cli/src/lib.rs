//! `prqa` command-line runner: ingest, train, eval, infer and convert.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "prqa", version, about = "Answer product questions from review sentences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw dumps, build QA and QR pairs, split, write pair files and stats.
    Ingest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train on ingested pairs and write the best checkpoint and the log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train on QA pairs only; no domain branch.
        #[arg(long)]
        no_adaptation: bool,
    },
    /// Score a checkpoint on a labeled set.
    Eval(EvalArgs),
    /// Classify one question/candidate pair.
    Infer {
        #[arg(long, required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        question: String,
        #[arg(long)]
        candidate: String,
    },
    /// Rewrite a Python-literal dump as strict JSON lines.
    Convert { input: PathBuf, output: PathBuf },
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("set").required(true).args(["source", "target", "dataset"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `model.ckpt` in the configured output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Held-out QA test pairs from the last ingest.
    #[arg(long, requires = "config")]
    pub source: bool,
    /// The labeled gold QR file named in the config.
    #[arg(long, requires = "config")]
    pub target: bool,
    /// Any labeled pair file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { config } => commands::ingest(&RunConfig::load(&config)?),
        Command::Train { config, no_adaptation } => {
            let mut cfg = RunConfig::load(&config)?;
            if no_adaptation {
                cfg.train.adaptation = false;
            }
            commands::train(&cfg)
        }
        Command::Eval(args) => {
            let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
            commands::eval(cfg.as_ref(), &args)
        }
        Command::Infer {
            checkpoint,
            config,
            question,
            candidate,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let ckpt = match (checkpoint, &cfg) {
                (Some(c), _) => c,
                (None, Some(cfg)) => cfg.output(commands::CHECKPOINT),
                (None, None) => return Err(CliError::Usage("--checkpoint or --config is required".into())),
            };
            commands::infer(&ckpt, &question, &candidate)
        }
        Command::Convert { input, output } => commands::convert(&input, &output),
    }
}
