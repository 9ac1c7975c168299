mod commands;
mod export;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes shared by all commands.
pub mod exit {
    pub const OK: u8 = 0;
    /// A check ran to completion and failed.
    pub const CHECK_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const TRANSVERSALITY: u8 = 3;
    pub const INCOMPLETE_SCHEDULE: u8 = 4;
    pub const STALL: u8 = 5;
    pub const UNCONTROLLABLE: u8 = 6;
}

/// Environment variable selecting the tolerance profile.
pub const TOLERANCE_ENV: &str = "HMP_TOLERANCE";

#[derive(Parser, Debug)]
#[command(name = "hmp", version, about = "Hybrid minimum principle toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output`, then `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for randomized checks; defaults to the config's `seed`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward simulation under the configured control.
    Simulate(Common),
    /// Backward adjoint, switch multipliers and PMP report.
    Adjoint(Common),
    /// Finite-difference checks of the needle-variation formulas.
    Verify(Common),
    /// Optimize switching states and times.
    Solve(Common),
}

/// Pass thresholds for the report checks.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct Tolerances {
    pub profile: &'static str,
    pub jump_residual: f64,
    pub hamiltonian_gap: f64,
    pub pmp_gap: f64,
    pub min_order: f64,
    pub max_relative_error: f64,
    pub cone: f64,
}

impl Tolerances {
    pub fn from_env() -> Result<Self, String> {
        match std::env::var(TOLERANCE_ENV).as_deref() {
            Err(_) | Ok("") | Ok("default") => Ok(Self {
                profile: "default",
                jump_residual: 1e-8,
                hamiltonian_gap: 1e-4,
                pmp_gap: 1e-3,
                min_order: 0.9,
                max_relative_error: 1e-2,
                cone: 1e-4,
            }),
            Ok("strict") => Ok(Self {
                profile: "strict",
                jump_residual: 1e-10,
                hamiltonian_gap: 1e-6,
                pmp_gap: 1e-4,
                min_order: 0.95,
                max_relative_error: 1e-3,
                cone: 1e-6,
            }),
            Ok(other) => Err(format!(
                "{TOLERANCE_ENV}={other}: expected `strict` or `default`"
            )),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let tol = match Tolerances::from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::CONFIG);
        }
    };
    let code = match &cli.command {
        Command::Simulate(c) => commands::simulate(c, &tol),
        Command::Adjoint(c) => commands::adjoint(c, &tol),
        Command::Verify(c) => commands::verify(c, &tol),
        Command::Solve(c) => commands::solve(c, &tol),
    };
    ExitCode::from(code)
}
