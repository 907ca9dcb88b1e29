use std::path::PathBuf;

use clap::Args;
use plansense::cioc::{assemble_demo, fit_theta, FitOptions};
use plansense::cost::{CostModel, FeatureSet, Theta};
use plansense::scene::Scene;
use rayon::prelude::*;
use serde::Serialize;

use super::{build_model, parse_feature_set, require_horizon};
use crate::error::{CliError, CliResult};
use crate::io;
use crate::Run;

#[derive(Args, Serialize)]
pub struct FitArgs {
    /// Directory of scene files with expert ego trajectories.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_parser = parse_feature_set, default_value = "toy4")]
    feature_set: FeatureSet,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Reference weights for the cosine check (default: the weights the
    /// scenes were generated with, if they all agree).
    #[arg(long, value_delimiter = ',')]
    planted: Option<Vec<f64>>,
}

/// Generator weights shared by every scene, if any.
fn planted_from_meta(scenes: &[(String, Scene)]) -> Option<Vec<f64>> {
    let read = |s: &Scene| -> Option<Vec<f64>> {
        serde_json::from_value(s.meta.as_ref()?.get("theta")?.clone()).ok()
    };
    let first = read(&scenes[0].1)?;
    scenes.iter().all(|(_, s)| read(s).as_ref() == Some(&first)).then_some(first)
}

pub fn run(run: &Run, args: FitArgs) -> CliResult<()> {
    let config = run.config("fit", &args);
    let paths = io::scene_paths(&args.scenes)?;
    io::prepare_dir(&run.out)?;
    let scenes = io::load_scenes(&paths)?;
    let horizon = require_horizon(&scenes)?;
    let fs = args.feature_set;
    let template = build_model(fs, Some(&vec![1.0; fs.len()]), args.sigma, horizon)?;

    let demos = run.install(|| {
        scenes
            .par_iter()
            .map(|(id, s)| assemble_demo(s, &template).map_err(|e| CliError::from(e).context(id)))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let options = FitOptions {
        lambda: args.lambda,
        max_iters: args.max_iters,
        seed: run.seed,
        ..Default::default()
    };
    let mut report = fit_theta(&demos, fs, &options)?;
    if let Some(planted) = args.planted.clone().or_else(|| planted_from_meta(&scenes)) {
        let planted = Theta::new(fs, planted)?;
        report.planted_cosine = Some(planted.cosine_similarity(&report.theta()?));
    }
    let model = CostModel::new(report.theta()?, template.rbf, horizon)?;

    let model_doc = serde_json::json!({ "config": config, "model": io::raw_json(&model.to_json()?)? });
    io::write_json(&run.out.join("model.json"), &model_doc)?;
    io::write_json(&run.out.join("fit_report.json"), &io::envelope(&config, "report", &report)?)?;
    eprintln!(
        "fit {} demos: theta {:?}, converged {}{}",
        report.demos,
        report.theta_hat,
        report.converged,
        report.planted_cosine.map_or(String::new(), |c| format!(", cosine {c:.4}"))
    );
    Ok(())
}
