use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use marketlab::experiment::{self, ExperimentError};

#[derive(Debug, Parser)]
#[command(name = "marketlab", version, about = "Run market-game experiments from TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Record file path; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List experiment kinds with their modules and required keys.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", experiment::list_experiments());
            ExitCode::SUCCESS
        }
        Command::Run { config, out } => {
            let mut parsed = match experiment::parse_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            if let Some(out) = out {
                parsed.out = out;
            }
            match experiment::run_experiment(&parsed) {
                Ok(summary) => {
                    print!("{}", summary.to_text());
                    ExitCode::SUCCESS
                }
                Err(e @ ExperimentError::Config(_)) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
