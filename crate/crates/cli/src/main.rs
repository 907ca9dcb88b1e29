use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod error;
mod io;

use commands::{evaluate, fit, model, reopt, scenes, sweep};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "plansense", version, about = "Planning-informed evaluation of predictions and detections")]
struct Cli {
    /// Base seed; recorded in every output.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic scene generation.
    #[command(subcommand)]
    Scenes(scenes::ScenesCommand),
    /// Write a cost model with given weights.
    Model(model::ModelArgs),
    /// Fit cost weights to expert scenes.
    Fit(fit::FitArgs),
    /// Raw and planning-informed metrics.
    Evaluate(evaluate::EvaluateArgs),
    /// Mean detection sensitivity against detection noise.
    NoiseSweep(sweep::SweepArgs),
    /// Recover ego plans from logged scenes.
    Reopt(reopt::ReoptArgs),
}

/// Shared run settings handed to every subcommand.
pub struct Run {
    pub seed: u64,
    pub out: PathBuf,
    pool: rayon::ThreadPool,
}

impl Run {
    /// Config block embedded in outputs. Worker count and output path are
    /// left out so results do not depend on them.
    pub fn config<T: serde::Serialize>(&self, command: &str, args: &T) -> serde_json::Value {
        serde_json::json!({ "command": command, "seed": self.seed, "args": args })
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Input("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| CliError::Input(e.to_string()))?;
    let run = Run { seed: cli.seed, out: cli.out, pool };
    match cli.command {
        Command::Scenes(c) => scenes::run(&run, c),
        Command::Model(a) => model::run(&run, a),
        Command::Fit(a) => fit::run(&run, a),
        Command::Evaluate(a) => evaluate::run(&run, a),
        Command::NoiseSweep(a) => sweep::run(&run, a),
        Command::Reopt(a) => reopt::run(&run, a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
