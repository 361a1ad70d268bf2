//! `longcast` command-line interface: train, predict, evaluate,
//! benchmark and ablate the forecasting pipeline.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_RESOURCE: i32 = 5;

#[derive(Parser)]
#[command(
    name = "longcast",
    version,
    about = "Long-sequence time-series forecasting with probability-sparse attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model on a CSV series and write checkpoint + history.
    Train(commands::TrainArgs),
    /// Roll a trained model over a series and emit a prediction CSV.
    Predict(commands::PredictArgs),
    /// Evaluate a checkpoint: MSE/MAE over rolling windows.
    Eval(commands::EvalArgs),
    /// Instrumented complexity reports over a grid of sequence lengths.
    Bench(commands::BenchArgs),
    /// Run the attention x distilling x decoding toggle grid.
    Ablate(commands::AblateArgs),
    /// Generate a deterministic synthetic series CSV.
    Synth(commands::SynthArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::cmd_train(args),
        Command::Predict(args) => commands::cmd_predict(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Bench(args) => commands::cmd_bench(args),
        Command::Ablate(args) => commands::cmd_ablate(args),
        Command::Synth(args) => commands::cmd_synth(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            longcast::Error::Config(_) | longcast::Error::Parse(_) => EXIT_CONFIG,
            longcast::Error::Data(_) | longcast::Error::Io(_) => EXIT_DATA,
            longcast::Error::Resource(_) => EXIT_RESOURCE,
            longcast::Error::Dim(_)
            | longcast::Error::Contract(_)
            | longcast::Error::Numeric(_) => EXIT_NUMERIC,
        };
        std::process::exit(code);
    }
}
