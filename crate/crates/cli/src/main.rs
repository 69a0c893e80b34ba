//! `hybrid-distill`: teacher, all-linear distillation, layer scoring,
//! selection, final hybrid and the toy sweeps as subcommands.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime or convergence
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<hybrid_distill::Error> for CliError {
    fn from(e: hybrid_distill::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "hybrid-distill", version, about = "Distil a softmax Transformer into a softmax/linear-attention hybrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or train the teacher and write its checkpoint.
    TrainTeacher(Common),
    /// Stage 1 then stage 2 into an all-linear student.
    DistillAllLinear(Common),
    /// One-swap importance of every layer.
    ScoreLayers(Common),
    /// Pick the softmax layers from a table or rankings.
    Select(Common),
    /// Stage 2 of the hybrid built from a selection.
    DistillHybrid(Common),
    /// Recall, local accuracy and KL against the softmax budget.
    SweepK(Common),
    /// Recall, local accuracy and KL of all-SWA students per window.
    SweepWindow(Common),
    /// Early-stop diagnostics over score snapshots.
    AnalyzeStability(Common),
    /// Adjacency index and pairwise agreement of selections.
    AnalyzeAdjacency(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the base seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    use Command::*;
    let common = match &cli.command {
        TrainTeacher(c) | DistillAllLinear(c) | ScoreLayers(c) | Select(c) | DistillHybrid(c) | SweepK(c)
        | SweepWindow(c) | AnalyzeStability(c) | AnalyzeAdjacency(c) => c,
    };
    let overrides = Overrides {
        seed: common.seed,
        workers: common.workers,
        out: common.out.clone(),
    };
    let cfg = RunConfig::load(&common.config, &overrides)?;
    let value = match cli.command {
        TrainTeacher(_) => serde_json::to_value(commands::train_teacher(&cfg)?)?,
        DistillAllLinear(_) => serde_json::to_value(commands::distill_all_linear_cmd(&cfg)?)?,
        ScoreLayers(_) => serde_json::to_value(commands::score_layers(&cfg)?)?,
        Select(_) => serde_json::to_value(commands::select(&cfg)?)?,
        DistillHybrid(_) => serde_json::to_value(commands::distill_hybrid(&cfg)?)?,
        SweepK(_) => serde_json::to_value(commands::sweep_k(&cfg)?)?,
        SweepWindow(_) => serde_json::to_value(commands::sweep_window(&cfg)?)?,
        AnalyzeStability(_) => serde_json::to_value(commands::analyze_stability(&cfg)?)?,
        AnalyzeAdjacency(_) => serde_json::to_value(commands::analyze_adjacency(&cfg)?)?,
    };
    Ok(value)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hybrid-distill: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
