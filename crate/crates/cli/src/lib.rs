//! Command-line surface over the `fbcnet` library.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Precision, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fbcnet", version, about = "Fore-background contrast attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output directory (default `fbcnet-out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for ablation seeds.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,

    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every op and block.
    Gradcheck,
    /// Train the toy detector; writes weights and per-epoch metrics.
    TrainToy,
    /// Re-evaluate trained weights found in the output directory.
    EvalToy,
    /// Train every attention variant over several seeds.
    Ablate,
    /// Parameter and multiply-add counts of the attention blocks.
    BenchAttn,
    /// Write FBCA activation maps and channel vectors for one image.
    DumpAttn {
        /// Evaluation-split image index (overrides the config).
        #[arg(long)]
        image: Option<usize>,
    },
}

/// Parses the config and dispatches; the returned code is the process exit code.
pub fn run(cli: Cli) -> u8 {
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fbcnet: {e}");
            e.exit_code()
        }
    }
}
