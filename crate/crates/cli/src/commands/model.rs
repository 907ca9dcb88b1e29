use clap::Args;
use plansense::cost::FeatureSet;
use serde::Serialize;

use super::{build_model, parse_feature_set};
use crate::error::CliResult;
use crate::io;
use crate::Run;

#[derive(Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_feature_set, default_value = "toy4")]
    feature_set: FeatureSet,
    /// Weights, comma separated (default: the built-in set).
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 4)]
    horizon: usize,
}

pub fn run(run: &Run, args: ModelArgs) -> CliResult<()> {
    let config = run.config("model", &args);
    let model = build_model(args.feature_set, args.theta.as_deref(), args.sigma, args.horizon)?;
    io::prepare_dir(&run.out)?;
    let doc = serde_json::json!({ "config": config, "model": io::raw_json(&model.to_json()?)? });
    io::write_json(&run.out.join("model.json"), &doc)
}
