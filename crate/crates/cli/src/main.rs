mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Driver profiling and identification from car-following data.
#[derive(Parser, Debug)]
#[command(name = "drivprof", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location (directory or file, depending on the subcommand).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with train/ and test/ splits.
    Generate(commands::GenerateArgs),
    /// Train a model; writes model.json and trace artifacts to a run directory.
    Train(commands::TrainArgs),
    /// Evaluate a model on labeled data; writes a report directory.
    Evaluate(commands::EvaluateArgs),
    /// Train and evaluate over a hyperparameter grid.
    Sweep(commands::SweepArgs),
    /// Identify the driver of one or more sequence files (JSON on stdout).
    Identify(commands::IdentifyArgs),
    /// Register a new driver into a copy of a model.
    Register(commands::RegisterArgs),
    /// Print profiles, feature contributions and states of a model.
    Inspect(commands::InspectArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a, &cli.common),
        Command::Train(a) => commands::train(a, &cli.common),
        Command::Evaluate(a) => commands::evaluate(a, &cli.common),
        Command::Sweep(a) => commands::sweep(a, &cli.common),
        Command::Identify(a) => commands::identify(a, &cli.common),
        Command::Register(a) => commands::register(a, &cli.common),
        Command::Inspect(a) => commands::inspect(a, &cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let line = serde_json::json!({
                "error": kind,
                "message": format!("{e:#}").replace('\n', " "),
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}

/// Error kind and exit code: 3 for numerical failures, 2 otherwise.
fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<drivprof::Error>() {
            return (d.kind(), if d.is_numerical() { 3 } else { 2 });
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 2);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("json", 2);
        }
    }
    ("invalid", 2)
}
