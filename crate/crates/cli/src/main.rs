//! `simfuse` command-line front-end.

mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::SpecArgs;

/// Bad flags, unreadable or invalid configuration. Exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl UsageError {
    pub fn msg(m: impl Into<String>) -> anyhow::Error {
        anyhow::Error::new(UsageError(m.into()))
    }

    pub fn wrap(e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(UsageError(format!("{e:#}")))
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// One or more grid cells diverged. Exit status 3.
#[derive(Debug)]
pub struct CellFailure(pub usize);

impl fmt::Display for CellFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} cell(s) failed", self.0)
    }
}

impl std::error::Error for CellFailure {}

/// A gradient audit exceeded its tolerance. Exit status 4.
#[derive(Debug)]
pub struct AuditFailure(pub Vec<String>);

impl fmt::Display for AuditFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient audit failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for AuditFailure {}

#[derive(Parser, Debug)]
#[command(
    name = "simfuse",
    version,
    about = "Similarity-guided multimodal fusion experiments"
)]
pub struct Cli {
    /// Run single-threaded and keep wall-clock values out of metric files,
    /// so reruns produce byte-identical outputs. Pass `false` for the thread pool.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus as an embedding file plus JSON sidecar.
    GenData {
        /// Synthetic corpus parameters (JSON or TOML), or a gen-data manifest.
        #[arg(long, value_name = "PATH")]
        config: Option<std::path::PathBuf>,
        /// Generator seed.
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: std::path::PathBuf,
    },
    /// Train one variant and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Variant to train when the spec lists several.
        #[arg(long, value_name = "NAME")]
        variant: Option<String>,
    },
    /// Accuracy of a checkpoint on a split of the configured corpus.
    Eval {
        #[command(flatten)]
        spec: SpecArgs,
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<std::path::PathBuf>,
        /// Split to score: train, test or all.
        #[arg(long, value_name = "SPLIT")]
        split: Option<String>,
    },
    /// Train every (variant, seed) cell and write per-cell and summary reports.
    Ablate {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Project fused representations onto their top two principal components.
    Project {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<std::path::PathBuf>,
        /// Split to project: train, test or all.
        #[arg(long, value_name = "SPLIT")]
        split: Option<String>,
    },
    /// Compare analytic and central-difference gradients of every parameter.
    GradAudit {
        /// Variant to audit (JSON or TOML), or a grad-audit manifest; defaults to
        /// the full variant at d = 8, L = 2, two heads.
        #[arg(long, value_name = "PATH")]
        config: Option<std::path::PathBuf>,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Double the gradient flowing into this parameter.
        #[arg(long, value_name = "PARAM")]
        sabotage: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<std::path::PathBuf>,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CellFailure>().is_some() {
        return 3;
    }
    if e.downcast_ref::<AuditFailure>().is_some() {
        return 4;
    }
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<simfuse::Error>() {
            if matches!(
                err,
                simfuse::Error::Config(_)
                    | simfuse::Error::Format(_)
                    | simfuse::Error::UnknownParam(_)
                    | simfuse::Error::Empty(_)
                    | simfuse::Error::Label { .. }
            ) {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
