//! Command-line front end: derive effective systems, run evolutions,
//! sweep the expansion parameter, and execute the algebra verification
//! suite. Exit codes: 0 success, 1 validation failure, 2 numerical
//! invariant violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use effmeq::Error;

#[derive(Parser)]
#[command(
    name = "effmeq",
    about = "Effective Hamiltonians and effective Lindblad master equations from small nonlinear rotations of deformed su(2) algebras"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser, Debug)]
struct CommonArgs {
    /// Path to the run configuration (flat key = value format)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir from the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dissipator expansion order in ε (overrides run.order)
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    order: Option<u8>,
    /// Apply the rotating-wave filter (overrides run.rwa)
    #[arg(long)]
    rwa: bool,
    /// Treat this factor (by label) as a vacuum mode and trace it out
    #[arg(long, value_name = "FACTOR")]
    vacuum_reduce: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the deformed-algebra relations and extract the structure polynomial
    Verify(CommonArgs),
    /// Derive the effective Hamiltonian and transformed dissipators
    Derive(CommonArgs),
    /// Integrate the exact and effective master equations and compare
    Evolve(CommonArgs),
    /// Run derive + evolve over the configured g values in parallel
    Sweep(CommonArgs),
}

fn load_config(args: &CommonArgs) -> Result<(config::RunConfig, PathBuf), Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {:?}: {e}", args.config)))?;
    let mut cfg = config::parse(&text)?;
    if let Some(order) = args.order {
        cfg.run.order = order;
    }
    if args.rwa {
        cfg.run.apply_rwa = true;
    }
    if let Some(label) = &args.vacuum_reduce {
        cfg.run.vacuum_reduce = Some(label.clone());
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

/// 1 for validation problems, 2 for numerical-invariant violations.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvariantViolation { .. }
        | Error::ExtractionFailed { .. }
        | Error::NotUnitary { .. }
        | Error::DoesNotCommute { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Verify(args) => load_config(args).and_then(|(cfg, out)| {
            let pass = commands::cmd_verify(&cfg, &out)?;
            if pass {
                Ok(())
            } else {
                Err(Error::ExtractionFailed {
                    n_value: f64::NAN,
                    residual: f64::NAN,
                    tol: 1e-12,
                })
            }
        }),
        Command::Derive(args) => {
            load_config(args).and_then(|(cfg, out)| commands::run_derive(&cfg, &out).map(|_| ()))
        }
        Command::Evolve(args) => {
            load_config(args).and_then(|(cfg, out)| commands::run_evolve(&cfg, &out).map(|_| ()))
        }
        Command::Sweep(args) => {
            load_config(args).and_then(|(cfg, out)| commands::run_sweep(&cfg, &out))
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
