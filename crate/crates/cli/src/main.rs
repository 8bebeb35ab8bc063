//! Batch front end for the hybrid dynamics library.
//!
//! `hybridflow <command> --config <path> [--out <dir>] [--seed <u64>]`
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical
//! failure, 3 property-check failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use config::CommandKind;

#[derive(Parser)]
#[command(
    name = "hybridflow",
    version,
    about = "Coupled classical-quantum Hamiltonian dynamics runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving every output file
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the seed found in the configuration
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one hybrid trajectory and write it as CSV
    Simulate(RunArgs),
    /// Propagate a hybrid density by Monte Carlo characteristics
    Ensemble(RunArgs),
    /// Sweep random Hermitian pairs: quantum bracket vs commutator
    BracketCheck(RunArgs),
    /// Compare the bilinear model against its two-oscillator reference
    BenchmarkPeresTerno(RunArgs),
    /// Displace one classical coordinate and bound the response
    Tangibility(RunArgs),
    /// Compare symbolic bracket closure against the numeric bracket
    ClosureCheck(RunArgs),
}

impl Command {
    fn split(self) -> (CommandKind, RunArgs) {
        match self {
            Command::Simulate(a) => (CommandKind::Simulate, a),
            Command::Ensemble(a) => (CommandKind::Ensemble, a),
            Command::BracketCheck(a) => (CommandKind::BracketCheck, a),
            Command::BenchmarkPeresTerno(a) => (CommandKind::BenchmarkPeresTerno, a),
            Command::Tangibility(a) => (CommandKind::Tangibility, a),
            Command::ClosureCheck(a) => (CommandKind::ClosureCheck, a),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems share the validation exit code; help and
            // version requests are successes.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let (kind, args) = cli.command.split();
    let result = config::load(kind, &args.config, args.seed)
        .and_then(|plan| commands::run(plan, &args.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
