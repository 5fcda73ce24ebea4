//! `ddr`: generate synthetic benchmarks, train the joint quantile/CDF model
//! or its fixed-percentile baselines, and tabulate evaluations, predictions,
//! and quantile curves as CSV/JSON.
//!
//! Every command is deterministic given its arguments; seeds are arguments.
//! Errors print to stderr as a single `ddr: error: <message>` line. Exit code
//! is 0 on success, 1 on a runtime error, 2 on a usage error.

mod curves;
mod evaluate;
mod generate;
mod model;
mod predict;
mod table;
mod train;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use thiserror::Error;

use ddr_core::data::DataError;
use ddr_core::inference::InferenceError;
use ddr_core::metrics::MetricsError;
use ddr_core::network::{ModelError, ModelFileError};
use ddr_core::training::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Msg(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn msg(m: impl Into<String>) -> Self {
        CliError::Msg(m.into())
    }
}

#[derive(Parser)]
#[command(name = "ddr", version, about = "Joint quantile and distribution regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it with its oracle sidecar
    Generate(generate::GenerateArgs),
    /// Fit a model on a CSV and write the model, run log, and epoch table
    Train(train::TrainArgs),
    /// Score a trained model on a labelled CSV
    Evaluate(evaluate::EvaluateArgs),
    /// Tabulate per-row predictions for requested percentiles or values
    Predict(predict::PredictArgs),
    /// Tabulate quantile curves over a grid of a single feature
    Curves(curves::CurvesArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => generate::run(args),
        Command::Train(args) => train::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Predict(args) => predict::run(args),
        Command::Curves(args) => curves::run(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => match err.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{err}");
                std::process::exit(0);
            }
            _ => {
                // collapse clap's multi-line message to the one-line contract
                let text = err.to_string();
                let line = text
                    .lines()
                    .next()
                    .unwrap_or("invalid usage")
                    .trim_start_matches("error: ");
                eprintln!("ddr: error: {line}");
                std::process::exit(2);
            }
        },
    };
    if let Err(err) = run(cli) {
        if broken_pipe(&err) {
            // the reader went away; not our error
            std::process::exit(0);
        }
        eprintln!("ddr: error: {err}");
        std::process::exit(1);
    }
}

fn broken_pipe(err: &CliError) -> bool {
    let pipe = |e: &std::io::Error| e.kind() == std::io::ErrorKind::BrokenPipe;
    match err {
        CliError::Io { source, .. } => pipe(source),
        // csv::Error does not expose its io cause through source()
        CliError::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(io) if pipe(io)),
        _ => false,
    }
}
