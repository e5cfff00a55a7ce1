//! `roft`: pretrain, fine-tune, benchmark and verify from JSON configs.
//!
//! Exit status is 0 on success, 1 when a verification suite fails and 2 for
//! configuration, IO or training errors.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "roft", version, about = "Robust fine-tuning of graph encoders")]
pub struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain an encoder (ssl or supervised) and write a checkpoint.
    Pretrain,
    /// Fine-tune a checkpoint with one strategy.
    Finetune,
    /// Run a strategy x dataset matrix and write CSV and Markdown reports.
    Bench,
    /// Run a verification suite.
    Verify {
        #[command(subcommand)]
        suite: Suite,
    },
    /// Write a synthetic JSON Lines dataset.
    GenData(GenArgs),
}

#[derive(Subcommand, Debug)]
pub enum Suite {
    /// Closed form against gradient descent on random quadratics.
    Prop1 {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Number of random instances, seeded consecutively.
        #[arg(long, default_value_t = 1)]
        instances: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Tape gradients against finite differences.
    Gradcheck {
        /// `all`, `penalties`, or a comma-separated list of check names.
        #[arg(long, default_value = "all")]
        checks: String,
        #[arg(long, default_value_t = 50)]
        configs: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Negate every tape gradient; the suite must then fail.
        #[arg(long)]
        inject_failure: bool,
    },
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// `classification` or `regression`.
    #[arg(long)]
    pub kind: Option<String>,
}

pub enum Failure {
    /// A suite ran and found a discrepancy.
    Verify(String),
    Other(String),
}

impl From<roft_core::Error> for Failure {
    fn from(e: roft_core::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
