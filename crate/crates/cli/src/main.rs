use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod source;

pub const VERSION: &str = env!("IVAE_VERSION");

#[derive(Parser, Debug)]
#[command(name = "ivae", version = VERSION, about = "Impartial training of heterogeneous and multimodal VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed and evaluate it on the test split.
    Train(commands::TrainArgs),
    /// Re-evaluate a trained run directory.
    Eval(commands::EvalArgs),
    /// Cross-validate resolver chains and report the winner.
    Sweep(commands::SweepArgs),
    /// Sample new rows from a trained model through a latent Gaussian mixture.
    Generate(commands::GenerateArgs),
    /// Write a synthetic dataset and its schema sidecar as CSV.
    Data(commands::DataArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Generate(a) => commands::generate(a),
        Command::Data(a) => commands::data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
