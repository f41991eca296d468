//! Command-line driver: argument parsing, configuration layering and exit codes.

pub mod commands;
pub mod config;

use std::io::ErrorKind;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use msvit::Error;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;
pub const EXIT_CHECKPOINT: i32 = 6;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => EXIT_MISSING_FILE,
        Error::Io { .. } => EXIT_IO,
        Error::Format { .. } => EXIT_FORMAT,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Dimension(_) | Error::Argument(_) => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "msvit", version, about = "Multi-modal selective ViT on synthetic fundus/OCT/record data")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate,
    /// Cross-validated training; writes checkpoints and metrics.
    Train,
    /// Test metrics of a checkpoint on its fold.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Rerun training over the values of one ablation axis.
    Ablate {
        /// selection_rate, tsia, record, st or mask
        #[arg(long)]
        axis: Option<String>,
    },
    /// Selection-frequency maps as PGM images.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Comma-separated sample ids; defaults to the fold's test split.
        #[arg(long)]
        samples: Option<String>,
    },
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve_config(cli: &Cli) -> msvit::Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    let c = &cli.common;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &c.data {
        cfg.data = Some(d.clone());
    }
    match &cli.command {
        Command::Eval { checkpoint, fold } | Command::Visualize { checkpoint, fold, .. } => {
            if let Some(p) = checkpoint {
                cfg.checkpoint = Some(p.clone());
            }
            if let Some(f) = fold {
                cfg.fold = *f;
            }
        }
        _ => {}
    }
    if let Command::Visualize { samples: Some(s), .. } = &cli.command {
        cfg.set("samples", s)?;
    }
    if let Command::Ablate { axis: Some(a) } = &cli.command {
        cfg.set("axis", a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> msvit::Result<()> {
    let cfg = resolve_config(cli)?;
    let verbose = cli.common.verbose;
    match cli.command {
        Command::Generate => commands::generate(&cfg).map(drop),
        Command::Train => commands::train(&cfg, verbose).map(drop),
        Command::Eval { .. } => commands::eval(&cfg).map(drop),
        Command::Ablate { .. } => commands::ablate(&cfg, verbose).map(drop),
        Command::Visualize { .. } => commands::visualize(&cfg).map(drop),
    }
}
