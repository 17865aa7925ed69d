//! Experiment runner CLI: `run` a scenario, `verify` a finished run's
//! dumps, `compare` two metrics files. All logic lives in the library.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "tdml", about = "Blockchain-coordinated distributed training simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file and write the artifact tree.
    Run {
        /// Scenario TOML file.
        scenario: PathBuf,
        /// Override the scenario's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out-<job_tag>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a run directory: chains, replay, validation re-derivation.
    Verify {
        /// Directory written by `run`.
        dir: PathBuf,
    },
    /// Compare two metrics.csv files epoch by epoch.
    Compare {
        a: PathBuf,
        b: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Run { scenario, seed, out } => match tdml::cli::run(&scenario, seed, out) {
            Ok(outcome) => {
                print!("{}", outcome.summary);
                println!("artifacts: {}", outcome.out_dir.display());
                outcome.exit_code
            }
            Err(e) => {
                eprintln!("run: {e}");
                tdml::cli::EXIT_CONFIG_ERROR
            }
        },
        Command::Verify { dir } => tdml::cli::verify(&dir),
        Command::Compare { a, b } => tdml::cli::compare(&a, &b),
    };
    ExitCode::from(code as u8)
}
