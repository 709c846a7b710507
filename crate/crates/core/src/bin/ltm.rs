use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ltm_core::cli;
use ltm_core::config::ExperimentConfig;
use ltm_core::lifelong::PredictMode;

#[derive(Parser)]
#[command(name = "ltm", version, about = "Lifelong sequence-memory experiments")]
struct Args {
    /// Experiment config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path for recall/predict results.
    #[arg(long, global = true, default_value = "out.ltmt")]
    out: PathBuf,

    /// How many results to retrieve.
    #[arg(long, global = true, default_value_t = 1)]
    k: usize,

    /// Prediction mode: average | multi.
    #[arg(long, global = true, default_value = "average")]
    mode: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace plus its label sidecar.
    Gen,
    /// Run the lifelong loop over the configured trace.
    Train,
    /// Reconstruct the nearest stored windows for a query trace.
    Recall { query: PathBuf },
    /// Predict continuation windows for a query trace.
    Predict { query: PathBuf },
    /// Grow the program bank on the configured trace.
    Grow,
    /// Summarize a model file.
    Stats { model: PathBuf },
}

fn run(args: Args) -> ltm_core::Result<String> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match args.command {
        Command::Gen => cli::cmd_gen(&cfg),
        Command::Train => cli::cmd_train(&cfg),
        Command::Recall { query } => cli::cmd_recall(&cfg, &query, &args.out, args.k),
        Command::Predict { query } => {
            let mode: PredictMode = args.mode.parse()?;
            cli::cmd_predict(&cfg, &query, &args.out, args.k, mode)
        }
        Command::Grow => cli::cmd_grow(&cfg),
        Command::Stats { model } => cli::cmd_stats(&model),
    }
}

fn main() {
    let args = Args::parse();
    match run(args) {
        Ok(msg) => println!("{msg}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
