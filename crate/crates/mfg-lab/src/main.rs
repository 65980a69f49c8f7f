//! CLI experiment runner.
//!
//! Exit codes: 0 success, 2 configuration/schema error, 3 solver
//! non-convergence (gap log printed to stderr), 4 budget exceeded,
//! 1 anything else. Errors never panic past this boundary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfg_lab::config::ExperimentConfig;
use mfg_lab::harness::{self, RunContext};
use mfg_lab::MfgError;

#[derive(Parser)]
#[command(
    name = "mfg-lab",
    about = "Mean-field-game numerical laboratory",
    version
)]
struct Cli {
    /// Path to the TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts (a per-subcommand subdirectory is
    /// created inside).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override experiment.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel experiment cells (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the MFG forward-backward system and snapshot the solution.
    SolveMfg,
    /// Compute the measure-derivative kernel of the master field.
    Kernel,
    /// Evaluate the master-equation residual on sampled measures.
    Residual,
    /// Check the flow/characteristics property of the master field.
    Flow,
    /// Solve N-player Nash systems and compare against the master field.
    Nash,
    /// Convergence-rate sweep of Nash values toward the master field.
    Converge,
    /// Projection residual of the master field onto the Nash system.
    Project,
    /// Propagation-of-chaos particle experiment.
    Chaos,
    /// Common-noise scenario tree solve.
    Tree,
    /// Potential-formulation optimality check.
    Potential,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SolveMfg => "solve-mfg",
            Command::Kernel => "kernel",
            Command::Residual => "residual",
            Command::Flow => "flow",
            Command::Nash => "nash",
            Command::Converge => "converge",
            Command::Project => "project",
            Command::Chaos => "chaos",
            Command::Tree => "tree",
            Command::Potential => "potential",
        }
    }
}

fn exit_code_for(err: &MfgError) -> u8 {
    match err {
        MfgError::Config(_) => 2,
        MfgError::NonConvergence { .. } | MfgError::Divergence(_) => 3,
        MfgError::Budget(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), MfgError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| MfgError::Config(format!("thread pool: {e}")))?;
    }
    let config_path = cli
        .config
        .ok_or_else(|| MfgError::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(&config_path)
        .map_err(|e| MfgError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    let name = cli.command.name();
    let ctx = RunContext::new(cfg, cli.out.join(name))?;
    harness::run(name, &ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let MfgError::NonConvergence { gap_history, .. } = &err {
                eprintln!("gap log:");
                for (i, g) in gap_history.iter().enumerate() {
                    eprintln!("  sweep {i}: {g:.6e}");
                }
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}
