//! `mmv`: calibrate market models, fit FIO tables and evaluate
//! pre-committed mean-variance policies.
//!
//! Exit codes: 0 success, 2 validation error, 3 solver error, 4 I/O error.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::Output;

#[derive(Parser)]
#[command(name = "mmv", version, about = "Cone-constrained multi-period mean-variance portfolio selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a linear factor model from dated return and factor CSVs.
    Calibrate(Common),
    /// Fit the FIO table and write per-cell diagnostics.
    Fit(Common),
    /// Efficient frontier and policy summary from a fitted table.
    Frontier(Common),
    /// Roll out the policy (or replay history) and report performance.
    Simulate(Common),
    /// Density martingale checks and the TCIE classification.
    Vssm(Common),
    /// Refit per cardinality bound and report with-cost performance.
    Sweep(Common),
    /// Frontier, coefficients, VSSM, statistics and (if configured) sweep.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// FIO table to read or write; defaults to `<out>/fio.json`.
    #[arg(long)]
    fio: Option<PathBuf>,
}

fn run(command: Command) -> Result<(), CliError> {
    let (common, action): (Common, fn(&Context) -> Result<(), CliError>) = match command {
        Command::Calibrate(c) => (c, commands::calibrate),
        Command::Fit(c) => (c, commands::fit),
        Command::Frontier(c) => (c, commands::frontier),
        Command::Simulate(c) => (c, commands::simulate),
        Command::Vssm(c) => (c, commands::vssm),
        Command::Sweep(c) => (c, commands::sweep),
        Command::Report(c) => (c, commands::report),
    };
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(CliError::validation("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation(format!("cannot start {n} workers: {e}")))?;
    }
    let loaded = RunConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(loaded.config.seed);
    let dir = common.out.unwrap_or_else(|| loaded.config.output_dir.clone());
    let ctx = Context {
        out: Output::new(dir, loaded.sha256, seed)?,
        config: loaded.config,
        seed,
        fio: common.fio,
    };
    log::info!("config sha256 {} seed {seed}", ctx.out.config_sha256);
    action(&ctx)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMV_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
