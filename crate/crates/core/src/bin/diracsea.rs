//! Command-line front-end. Every subcommand reads one configuration file,
//! writes its artifacts into the output directory, and prints a short
//! summary. Exit codes: 0 success, 2 bad configuration, 3 numerical or
//! runtime failure, 4 sweep finished with some points failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diracsea::config::Config;
use diracsea::runner::{
    cmd_dispersion, cmd_evolve, cmd_spectrum, cmd_sweep, jobs_from_env, EvolveOptions, RunError,
    SweepOptions,
};

#[derive(Parser)]
#[command(
    name = "diracsea",
    about = "Spontaneous pair creation of lattice Dirac fermions in a Gaussian well",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (INI-style sections).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalue flow over a depth grid, with level labels and branches.
    Spectrum {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Time evolution through one ramp schedule with pair counting.
    Evolve {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from a checkpoint left in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Grid of (lambda_max, T_tot) evolutions with scaling fits.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Skip points whose results already exist in the output directory.
        #[arg(long)]
        resume: bool,
        /// Worker threads; overrides DIRACSEA_JOBS and the config file.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Free-field band structure over the staggered momentum domain.
    Dispersion {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load(common: &CommonArgs) -> Result<Config, RunError> {
    Ok(Config::load(&common.config)?)
}

fn run(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Spectrum { common } => {
            let cfg = load(&common)?;
            let out = cmd_spectrum(&cfg, &common.out)?;
            println!(
                "spectrum: {} levels at {} depth points, {} branches ({} breaks)",
                out.levels_per_point, out.grid_points, out.branch_count, out.branch_breaks
            );
            match out.lambda_cr {
                Some(lc) => println!("lambda_cr = {lc:.6}"),
                None => println!("lambda_cr not bracketed by this grid"),
            }
            println!("manifest {}", out.manifest_hash);
            Ok(ExitCode::SUCCESS)
        }
        Command::Evolve { common, resume } => {
            let cfg = load(&common)?;
            let out = cmd_evolve(
                &cfg,
                &common.out,
                EvolveOptions {
                    resume,
                    max_steps: None,
                },
            )?;
            if let Some(step) = out.resumed_from {
                println!("resumed from step {step}");
            }
            match out.n_final {
                Some(n) => println!("N_final = {n:.6e} after {} steps", out.n_steps),
                None => println!("paused at step {:?}", out.paused_at),
            }
            println!("manifest {}", out.manifest_hash);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            common,
            resume,
            jobs,
        } => {
            let cfg = load(&common)?;
            let jobs = match jobs {
                Some(n) => Some(n),
                None => jobs_from_env()?,
            };
            let out = cmd_sweep(&cfg, &common.out, SweepOptions { resume, jobs })?;
            println!(
                "sweep: {} completed, {} skipped, {} failed",
                out.completed, out.skipped, out.failed
            );
            println!("manifest {}", out.manifest_hash);
            if out.failed > 0 {
                Ok(ExitCode::from(4))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Dispersion { common } => {
            let cfg = load(&common)?;
            let out = cmd_dispersion(&cfg, &common.out)?;
            println!("dispersion: {} momentum points", out.rows);
            println!("manifest {}", out.manifest_hash);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
