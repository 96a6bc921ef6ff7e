//! The `kolmo` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::RunSettings;
use crate::config::{RunConfig, DEFAULT_BUDGET};
use crate::error::CliError;
use crate::output::{emit, Format};

#[derive(Debug, Parser)]
#[command(
    name = "kolmo",
    version,
    about = "Numerics for degenerate Kolmogorov operators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; overrides the configuration.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Directory for output files; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Monte Carlo paths per estimate; overrides the configuration.
    #[arg(long, global = true)]
    pub budget: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Kalman index, block dimensions and the quasi-metric.
    Analyze,
    /// Controllability Gramian entries at the configured times.
    Gramian,
    /// Monte Carlo semigroup values and derivatives.
    Evaluate,
    /// Resolvent and parabolic solutions.
    Solve,
    /// Scaling and regularity checks.
    Verify,
}

/// Parses, validates and runs; returns the process exit code.
///
/// Failed checks are reported in the artifacts, not through the exit code.
pub fn run(cli: &Cli, stdout: &mut impl Write, stderr: &mut impl Write) -> i32 {
    match execute(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, stdout: &mut impl Write, stderr: &mut impl Write) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = RunConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(budget) = cli.budget {
        config.budget = Some(budget);
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    let validated = config.validate()?;
    let settings = RunSettings {
        seed: validated.config.seed.unwrap_or(0),
        budget: validated.config.budget.unwrap_or(DEFAULT_BUDGET),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(validated.config.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;

    let (tables, reports) = pool.install(|| -> Result<_, CliError> {
        Ok(match cli.command {
            Command::Analyze => (commands::analyze(&validated, &settings), Vec::new()),
            Command::Gramian => (commands::gramian(&validated, &settings)?, Vec::new()),
            Command::Evaluate => (commands::evaluate_cmd(&validated, &settings)?, Vec::new()),
            Command::Solve => (commands::solve(&validated, &settings)?, Vec::new()),
            Command::Verify => commands::verify_cmd(&validated, &settings)?,
        })
    })?;
    for r in &reports {
        writeln!(stderr, "{}", r.summary())?;
    }
    emit(&tables, cli.format, cli.out.as_deref(), stdout)
}
