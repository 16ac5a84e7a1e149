//! Command-line harness: training, generation, evaluation, comparison,
//! perturbation analysis, attention export, corpus statistics and gradient
//! checks.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dialoglab::models::Architecture;
use dialoglab::perturb::PerturbationKind;
use dialoglab::{Error, Result};

use config::{split_assignment, RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "dialoglab", version, about = "Train, evaluate and probe multi-turn dialog models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Architecture name (overrides `arch`).
    #[arg(long, global = true)]
    pub arch: Option<String>,
    /// Random seed (overrides `seed` and the environment).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one architecture and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training corpus (overrides `train_corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Greedily decode responses for a corpus.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dialogs to answer (overrides `test_corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score a checkpoint on a test corpus.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score several checkpoints and mark the best and second best per metric.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Measure how much context perturbations change the scores.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated perturbation kinds, or `all`.
        #[arg(long, default_value = "all")]
        kinds: String,
    },
    /// Export per-step attention weights of greedy decoding.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dialogs in the corpus JSON-lines format.
        #[arg(long)]
        dialogs: PathBuf,
    },
    /// Turn and length statistics of corpora.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long = "corpus", required = true, num_args = 1..)]
        corpora: Vec<PathBuf>,
    },
    /// Finite-difference gradient check of toy-sized models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check every architecture instead of `--arch`.
        #[arg(long)]
        all: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Compare { common, .. }
            | Command::Perturb { common, .. }
            | Command::Heatmap { common, .. }
            | Command::Stats { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn overrides(common: &Common, extra: &[(&str, Option<String>)]) -> Result<Vec<(String, String)>> {
    let mut out = common
        .set
        .iter()
        .map(|s| split_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    let flags = [
        ("arch", common.arch.clone()),
        ("seed", common.seed.map(|s| s.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags.into_iter().chain(extra.iter().map(|(k, v)| (*k, v.clone()))) {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    }
    Ok(out)
}

fn path_string(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Resolves the configuration for `command` with `env_seed` standing in
/// for the seed environment variable.
pub fn resolve_config(command: &Command, env_seed: Option<&str>) -> Result<RunConfig> {
    let extra: Vec<(&str, Option<String>)> = match command {
        Command::Train { corpus, epochs, .. } => vec![
            ("train_corpus", path_string(corpus)),
            ("epochs", epochs.map(|e| e.to_string())),
        ],
        Command::Generate { corpus, .. }
        | Command::Evaluate { corpus, .. }
        | Command::Compare { corpus, .. }
        | Command::Perturb { corpus, .. } => vec![("test_corpus", path_string(corpus))],
        _ => vec![],
    };
    let common = command.common();
    RunConfig::resolve(common.config.as_deref(), env_seed, &overrides(common, &extra)?)
}

/// Runs one command and returns its standard output.
pub fn run(cli: &Cli) -> Result<String> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = resolve_config(&cli.command, env_seed.as_deref())?;
    match &cli.command {
        Command::Train { .. } => commands::train(&cfg),
        Command::Generate { checkpoint, .. } => commands::generate(&cfg, checkpoint),
        Command::Evaluate { checkpoint, .. } => commands::evaluate_cmd(&cfg, checkpoint),
        Command::Compare { checkpoints, .. } => commands::compare(&cfg, checkpoints),
        Command::Perturb { checkpoint, kinds, .. } => {
            commands::perturb(&cfg, checkpoint, &PerturbationKind::parse_list(kinds)?)
        }
        Command::Heatmap { checkpoint, dialogs, .. } => commands::heatmap(&cfg, checkpoint, dialogs),
        Command::Stats { corpora, .. } => commands::stats_cmd(&cfg, corpora),
        Command::Gradcheck { all, .. } => {
            let archs = if *all { Architecture::ALL.to_vec() } else { vec![cfg.arch] };
            commands::gradcheck(&cfg, &archs)
        }
    }
}

/// The single line printed for a failed command.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.code())
}
