//! `sewnet`: train spiking residual networks, trace gradients and firing
//! rates, check gradient oracles, generate synthetic data and validate
//! architecture strings.
//!
//! Exit codes: 0 success, 1 numeric failure (divergence or oracle tolerance),
//! 2 configuration error, 3 I/O error.

// `!(x <= tol)` style comparisons are deliberate: they treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "sewnet",
    version,
    about = "Spike-element-wise residual networks: training and gradient diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on SEWF datasets; writes metrics.csv and summary.json.
    Train(Common),
    /// Per-block gradient norms of a block chain, with oracle comparison.
    Gradtrace(Common),
    /// Per-block firing rates of a block chain or a full architecture.
    Firetrace(Common),
    /// Compare AD gradients against the closed-form oracles on random chains.
    OracleCheck(Common),
    /// Generate a synthetic SEWF dataset.
    GenData(Common),
    /// Parse an architecture string and report its layers and parameter counts.
    ArchCheck(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture string, overriding the `arch` key.
    #[arg(long)]
    pub arch: Option<String>,
    /// Seed, overriding the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Force deterministic (ordered) reduction in multi-threaded training.
    #[arg(long)]
    pub deterministic: bool,
    /// Oracle check only: run chains with a perturbed threshold so the oracles must fail.
    #[arg(long)]
    pub force_failure: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => commands::train(c),
        Command::Gradtrace(c) => commands::gradtrace(c),
        Command::Firetrace(c) => commands::firetrace(c),
        Command::OracleCheck(c) => commands::oracle_check(c),
        Command::GenData(c) => commands::gen_data(c),
        Command::ArchCheck(c) => commands::arch_check(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
