use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod layered;

#[derive(Parser)]
#[command(name = "turbkit", version, about = "Turbulence simulation, restoration training and evaluation")]
struct Cli {
    /// Caps worker threads for every parallel stage.
    #[arg(long, global = true, env = "TURBKIT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a directory of clean PNGs into a synthetic pair dataset.
    Simulate(commands::SimulateArgs),
    /// Write procedural text-chart PNGs to use as clean images.
    Charts(commands::ChartsArgs),
    /// Write an untrained (identity) checkpoint.
    Init(commands::InitArgs),
    /// Supervised training on a pair manifest.
    Train(commands::TrainArgs),
    /// Fine-tune on synthetic pairs mixed with unlabeled real frames.
    Finetune(commands::FinetuneArgs),
    /// Restore every PNG of a directory.
    Infer(commands::InferArgs),
    /// Image and text-recognition metrics.
    Eval(commands::EvalArgs),
    /// Finite-difference check of layer and model gradients.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads {}: {}", n, e);
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Charts(a) => commands::charts(a),
        Command::Init(a) => commands::init(a),
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}

