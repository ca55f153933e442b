//! `hnf`: generate corpora, train, evaluate, mine hard negatives, dump token
//! weights and run ablation grids.

mod ablate;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hnf_core::Config;

#[derive(Debug, Parser)]
#[command(name = "hnf", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Training config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for training (`train.seed`) or generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Common {
    /// Config file, then overrides, then `--seed`. Unknown keys fail here,
    /// before any work starts.
    pub fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    pub fn out(&self) -> Result<&PathBuf> {
        self.out.as_ref().context("--out is required")
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted synthetic corpus. `--set` keys are spec fields here.
    Gen {
        /// Synthetic spec (TOML); defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train and write reports, metrics and checkpoints.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluate on this corpus instead of the training corpus.
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
        /// Start from a checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Retrieval metrics of a checkpoint, or of a stored similarity matrix.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required_unless_present = "similarity")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        similarity: Option<PathBuf>,
    },
    /// Hard negatives of seeded batches under a checkpoint.
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of batches; one pass over the videos by default.
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Token weights, masks and attention matrices of matched pairs.
    DumpWeights {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only the first N captions.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train every cell of a grid for every seed and tabulate rsum.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HNF_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HNF_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let c = &cli.common;
    match cli.command {
        Command::Gen { spec } => commands::gen(c, spec.as_deref()),
        Command::Train {
            corpus,
            eval_corpus,
            init,
        } => commands::train(c, &corpus, eval_corpus.as_deref(), init.as_deref()),
        Command::Eval {
            corpus,
            checkpoint,
            similarity,
        } => commands::eval(c, &corpus, checkpoint.as_deref(), similarity.as_deref()),
        Command::Mine {
            corpus,
            checkpoint,
            batches,
        } => commands::mine(c, &corpus, &checkpoint, batches),
        Command::DumpWeights {
            corpus,
            checkpoint,
            limit,
        } => commands::dump_weights(c, &corpus, &checkpoint, limit),
        Command::Ablate { corpus, grid } => ablate::run(c, &corpus, &grid),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
