use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

mod args;
mod commands;
mod config;

use args::*;
use config::ConfigFile;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] earlyexit_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser)]
#[command(name = "earlyexit", version, about = "Early-exit code completion: train, evaluate and serve")]
struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic Python corpus.
    SynthCorpus(SynthCorpusArgs),
    /// Tokenize a source tree, assign splits and write the manifest.
    Ingest(IngestArgs),
    /// Train a model with the weighted multi-exit loss.
    TrainLite(TrainLiteArgs),
    /// Train the exit policy with PPO on a trained model.
    TrainRl(TrainRlArgs),
    /// Convert a policy checkpoint into the deployable policy artifact.
    ExportPolicy(ExportPolicyArgs),
    /// Benchmark baselines and the dynamic controller across thresholds.
    Eval(EvalArgs),
    /// Decode every token at one fixed exit layer, for each schedule layer.
    FixedExitSweep(SweepArgs),
    /// Run the HTTP completion service.
    Serve(ServeArgs),
}

const SECTIONS: &[&str] = &[
    "synth-corpus",
    "ingest",
    "train-lite",
    "train-rl",
    "export-policy",
    "eval",
    "fixed-exit-sweep",
    "serve",
];

fn init_logging() {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_from_env("EARLYEXIT_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = ConfigFile::load(cli.config.as_deref(), SECTIONS)?;
    match cli.command {
        Command::SynthCorpus(a) => commands::synth_corpus(file.resolve("synth-corpus", &a)?),
        Command::Ingest(a) => commands::ingest(file.resolve("ingest", &a)?),
        Command::TrainLite(a) => commands::train_lite(file.resolve("train-lite", &a)?),
        Command::TrainRl(a) => commands::train_rl(file.resolve("train-rl", &a)?),
        Command::ExportPolicy(a) => commands::export_policy(file.resolve("export-policy", &a)?),
        Command::Eval(a) => commands::eval(file.resolve("eval", &a)?),
        Command::FixedExitSweep(a) => commands::fixed_exit_sweep(file.resolve("fixed-exit-sweep", &a)?),
        Command::Serve(a) => commands::serve(file.resolve("serve", &a)?),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    init_logging();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
