//! Command-line front end for the deraining pipeline: fixture generation,
//! upscaler pre-training, soft-label synthesis, the two-stage training loop
//! and checkpoint-driven inference, extraction, synthesis and scoring.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "derain", version, about = "Single-image deraining without paired data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic rainy/clean fixture pairs
    GenFixtures(commands::GenFixturesArgs),
    /// Pre-train the x8 upscaling network on rainy images
    PretrainSrdn(commands::PretrainSrdnArgs),
    /// Produce the blurred rain-free soft label for one image
    Transform(commands::TransformArgs),
    /// Train the deraining network on soft labels plus feedback pairs
    Train(commands::TrainArgs),
    /// Remove rain from one image with a trained checkpoint
    Infer(commands::InferArgs),
    /// Write the predicted rain map remapped for display
    ExtractRain(commands::ExtractRainArgs),
    /// Transplant extracted rain onto a clean image
    Synthesize(commands::SynthesizeArgs),
    /// Score a checkpoint against fixture pairs
    Eval(commands::EvalArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenFixtures(args) => commands::gen_fixtures(args),
        Command::PretrainSrdn(args) => commands::pretrain(args),
        Command::Transform(args) => commands::transform_cmd(args),
        Command::Train(args) => commands::train_cmd(args),
        Command::Infer(args) => commands::infer(args),
        Command::ExtractRain(args) => commands::extract_rain(args),
        Command::Synthesize(args) => commands::synthesize(args),
        Command::Eval(args) => commands::eval_cmd(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
