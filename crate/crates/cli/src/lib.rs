//! Command implementations behind the `gsopt` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

/// Exit code contract: 0 success, 2 input or config error, 3 backend or
/// authentication error.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gsopt", version, about = "Profile-guided LLM optimization of Gaussian splatting kernels")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the search seed and every mock backend seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace remote backends with mocks.
    #[arg(long, global = true)]
    pub mock: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roofline, stall, occupancy and workload summary.
    Profile {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        sm_count: Option<u32>,
        #[arg(long)]
        block_limit: Option<u32>,
    },
    /// Ask the planner for an advice list.
    Plan,
    /// Prune an advice list against the profile.
    Prune {
        /// Existing plan.json; a fresh plan is requested when absent.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run the evolutionary search and write a run directory.
    Search,
    /// Ask the checker whether a candidate is equivalent to the source.
    Check {
        candidate: PathBuf,
    },
    /// Render a scene with the reference rasterizer.
    Render {
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Build the checker by generator detection matrix.
    Crosscheck,
    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
    },
}

/// Runs the parsed command and returns what should be printed.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let opts = commands::Options {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        mock: cli.mock,
    };
    match cli.command {
        Command::Profile {
            metrics,
            workload,
            width,
            height,
            sm_count,
            block_limit,
        } => commands::profile(
            &opts,
            commands::ProfileArgs {
                metrics,
                workload,
                width,
                height,
                sm_count,
                block_limit,
            },
        ),
        Command::Plan => commands::plan(&opts),
        Command::Prune { plan } => commands::prune(&opts, plan.as_deref()),
        Command::Search => commands::search(&opts),
        Command::Check { candidate } => commands::check(&opts, &candidate),
        Command::Render { scene } => commands::render(&opts, scene.as_deref()),
        Command::Crosscheck => commands::crosscheck(&opts),
        Command::Report { run_dir } => commands::report(&run_dir),
    }
}
