//! `exitctl`: simulate, solve and diagnose exit-time control problems on the
//! built-in models.
//!
//! Exit codes: 0 on success, 2 on a configuration error, 3 on a numerical
//! failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{GridArgs, McArgs, PenaltyArgs, RegularityArgs, StartArgs};
use exitctl_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "exitctl",
    version,
    about = "Exit-time control of regime-switching diffusions"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Built-in model: tangency, noisy_tangency, reinsurance, brownian_exit.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Discount rate of the reinsurance model.
    #[arg(long, global = true)]
    pub discount_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a batch of paths under a constant control.
    Simulate {
        #[command(flatten)]
        start: StartArgs,
        #[command(flatten)]
        mc: McArgs,
        /// Also write the first N paths in full.
        #[arg(long, default_value_t = 0)]
        keep_paths: usize,
    },
    /// Solve the HJB system on a grid and report the Bellman residual.
    Solve {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        start: StartArgs,
        #[command(flatten)]
        mc: McArgs,
        /// Simulate the extracted policy from the start state to check the
        /// value; skipped when 0.
        #[arg(long, default_value_t = 0)]
        verify_paths: usize,
    },
    /// Penalty diagnostics and penalised value estimates over a list of epsilons.
    DiagnoseContinuity {
        #[command(flatten)]
        start: StartArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        penalty: PenaltyArgs,
        /// Constant controls per interval control set in the policy family.
        #[arg(long)]
        n_u: Option<usize>,
    },
    /// Regularity certificates for the boundary x = 0.
    CheckRegularity {
        #[command(flatten)]
        start: StartArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        regularity: RegularityArgs,
    },
    /// Canned pipelines for the built-in examples.
    Reproduce {
        /// tangency, noisy-tangency or reinsurance.
        target: String,
        /// Space intervals of the tangency surface.
        #[arg(long, default_value_t = 800)]
        n_x: usize,
        /// Keep every k-th node and layer in the surface file.
        #[arg(long, default_value_t = 4)]
        stride: usize,
    },
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteCoefficient { .. }
            | Error::NonFiniteState { .. }
            | Error::CflViolation { .. }
            | Error::NonMonotoneScheme { .. }
            | Error::RequiresUnstoppedPath => Failure::Numeric(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.global.config {
        Some(path) => config::RunConfig::load(path)?,
        None => config::RunConfig::default(),
    };
    let threads = cli.global.threads.or(file.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            start,
            mc,
            keep_paths,
        } => {
            let ctx = commands::Context::new(&cli.global, &file)?;
            commands::simulate(
                &ctx,
                start.overlay(file.start),
                mc.overlay(file.monte_carlo),
                keep_paths,
            )
        }
        Command::Solve {
            grid,
            start,
            mc,
            verify_paths,
        } => {
            let ctx = commands::Context::new(&cli.global, &file)?;
            commands::solve(
                &ctx,
                grid.overlay(file.grid),
                start.overlay(file.start),
                mc.overlay(file.monte_carlo),
                verify_paths,
            )
        }
        Command::DiagnoseContinuity {
            start,
            mc,
            penalty,
            n_u,
        } => {
            let ctx = commands::Context::new(&cli.global, &file)?;
            commands::diagnose_continuity(
                &ctx,
                start.overlay(file.start),
                mc.overlay(file.monte_carlo),
                penalty.overlay(file.penalty),
                n_u.or(file.grid.n_u),
            )
        }
        Command::CheckRegularity {
            start,
            mc,
            regularity,
        } => {
            let ctx = commands::Context::new(&cli.global, &file)?;
            commands::check_regularity(
                &ctx,
                start.overlay(file.start),
                mc.overlay(file.monte_carlo),
                regularity.overlay(file.regularity),
            )
        }
        Command::Reproduce {
            target,
            n_x,
            stride,
        } => commands::reproduce(&cli.global, &file, &target, n_x, stride),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("exitctl: {f}");
            ExitCode::from(f.code())
        }
    }
}
