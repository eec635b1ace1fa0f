use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use doprompt_core::Error;

mod commands;
mod runner;

/// Domain prompt learning experiments on procedural multi-domain images.
#[derive(Parser, Debug)]
#[command(name = "doprompt", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset and write it to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Write the directory-of-arrays layout instead of a single cache file.
        #[arg(long)]
        raw: bool,
    },
    /// Train one leave-one-domain-out run.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on every domain of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run all six ablation variants over seeds and target domains.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Train once per prompt length and tabulate target accuracy.
    SweepLength {
        #[command(flatten)]
        common: Common,
        /// Comma-separated prompt lengths; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Distance, adapter-weight, or per-prompt tables.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Required for the weights and prompt-table modes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Features for distance mode.
        #[arg(long, value_enum, default_value_t = FeatureKind::Raw)]
        features: FeatureKind,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset cache file or raw directory; generated from the config if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output location; defaults to a path under $DOPROMPT_OUT (or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel runs for ablate and sweep-length.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeMode {
    Distance,
    Weights,
    PromptTable,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Raw,
    Model,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Index(_) | Error::Contract(_) => 2,
        Error::NonFinite { .. } | Error::DegenerateDomain { .. } => 3,
        Error::Format { .. } | Error::Io { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
