use std::path::PathBuf;

use clap::Args;
use plansense::metrics::{aggregate_sweep, spearman, sweep_scene};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io;
use crate::Run;

#[derive(Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Detection noise levels in meters.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Frames evaluated in each scene; later frames than the scene holds are
    /// skipped.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20,25,30,35")]
    frames: Vec<usize>,
}

pub fn run(run: &Run, args: SweepArgs) -> CliResult<()> {
    let config = run.config("noise-sweep", &args);
    let paths = io::scene_paths(&args.scenes)?;
    io::require_file(&args.model)?;
    if args.grid.is_empty() || args.frames.is_empty() || args.trials == 0 {
        return Err(CliError::Input("grid, frames and trials must be non-empty".into()));
    }
    io::prepare_dir(&run.out)?;
    let model = io::load_model(&args.model)?;
    let scenes = io::load_scenes(&paths)?;
    let per_scene = run.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, (id, s))| {
                sweep_scene(s, &model, &args.grid, args.trials, &args.frames, run.seed, i)
                    .map_err(|e| CliError::from(e).context(id))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let points = aggregate_sweep(&args.grid, &per_scene);
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let rho = spearman(&args.grid, &means);

    let rows: Vec<String> = points.iter().map(|p| format!("{},{},{},{}", p.sigma, p.mean, p.ci95, p.samples)).collect();
    io::write_csv(&run.out.join("sweep.csv"), &config, "sigma,mean,ci95,samples", &rows)?;
    let doc = serde_json::json!({ "config": config, "points": points, "spearman": rho });
    io::write_json(&run.out.join("sweep.json"), &doc)?;
    eprintln!("spearman {}", rho.map_or("undefined".into(), |r| format!("{r:.4}")));
    Ok(())
}
