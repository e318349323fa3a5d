//! `bfmm`: simulate benchmark scenarios, fit mixture models, search model
//! grids, and evaluate clusterings against reference labels.
//!
//! Exit codes: 0 success, 2 usage error, 3 every chain failed, 4 I/O error.

mod commands;
mod output;

use clap::{Parser, Subcommand};

use bfmm::Error;

#[derive(Parser)]
#[command(name = "bfmm", version, about = "Mixture-model clustering for mixed data with censored values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark scenario with planted clusters
    Simulate(commands::SimulateArgs),
    /// Fit one mixture model and write assignments, importance, diagnostics
    Fit(commands::FitArgs),
    /// Fit a grid of (clusters, structure) candidates and rank by ICL
    Select(commands::SelectArgs),
    /// Compare an assignments file against reference labels
    Evaluate(commands::EvaluateArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(&args),
        Command::Fit(args) => commands::fit(&args),
        Command::Select(args) => commands::select(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Validation(_) | Error::Parameter(_) => 2,
            Error::AllChainsFailed(_) => 3,
            Error::Io(_) | Error::Csv(_) => 4,
            _ => 1,
        });
    }
}
