use std::path::PathBuf;

use clap::Args;
use plansense::planner::reoptimize;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io;
use crate::Run;

#[derive(Args, Serialize)]
pub struct ReoptArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

pub fn run(run: &Run, args: ReoptArgs) -> CliResult<()> {
    let config = run.config("reopt", &args);
    let paths = io::scene_paths(&args.scenes)?;
    io::require_file(&args.model)?;
    let dir = run.out.join("reopt");
    io::prepare_dir(&dir)?;
    let model = io::load_model(&args.model)?;
    let scenes = io::load_scenes(&paths)?;

    let errors = run.install(|| {
        scenes
            .par_iter()
            .map(|(id, scene)| {
                let ctx = |e: plansense::Error| CliError::from(e).context(id);
                let with = reoptimize(scene, &model, true).map_err(ctx)?;
                let without = reoptimize(scene, &model, false).map_err(ctx)?;
                let doc = serde_json::json!({
                    "config": config,
                    "scene": id,
                    "with_prediction": with.summary(),
                    "without_prediction": without.summary(),
                });
                io::write_json(&dir.join(format!("{id}.json")), &doc)?;
                Ok([with.max_x, with.max_y, without.max_x, without.max_y])
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let rows: Vec<String> = scenes
        .iter()
        .zip(&errors)
        .map(|((id, _), e)| format!("{id},{},{},{},{}", e[0], e[1], e[2], e[3]))
        .collect();
    io::write_csv(&run.out.join("reopt_summary.csv"), &config, "scene,max_x,max_y,max_x_without,max_y_without", &rows)?;
    let col = |k: usize| io::mean(errors.iter().map(|e| e[k]));
    let doc = serde_json::json!({
        "config": config,
        "scenes": scenes.len(),
        "mean_max_x": col(0),
        "mean_max_y": col(1),
        "mean_max_x_without": col(2),
        "mean_max_y_without": col(3),
    });
    io::write_json(&run.out.join("reopt_summary.json"), &doc)?;
    eprintln!(
        "mean max error ({:.4}, {:.4}) m; without prediction term ({:.4}, {:.4}) m",
        col(0).unwrap_or(f64::NAN),
        col(1).unwrap_or(f64::NAN),
        col(2).unwrap_or(f64::NAN),
        col(3).unwrap_or(f64::NAN)
    );
    Ok(())
}
