use std::collections::BTreeMap;

use clap::{Args, Subcommand};
use plansense::cost::FeatureSet;
use plansense::prediction::{AgentPrediction, PredictionSet};
use plansense::sim::{expert_rollout, generate_scenario, head_on_scene, make_errant_prediction_pair, ExpertOptions, HeadOnSpec, ScenarioSpec};
use rayon::prelude::*;
use serde::Serialize;

use super::{build_model, parse_feature_set};
use crate::error::{CliError, CliResult};
use crate::io;
use crate::Run;

#[derive(Subcommand)]
pub enum ScenesCommand {
    /// One scene file per seed, with the expert ego rollout.
    Generate(GenerateArgs),
    /// Head-on encounter plus a toward/away prediction pair.
    HeadOn(HeadOnArgs),
}

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 64)]
    count: u64,
    #[arg(long, default_value_t = 2)]
    agents: usize,
    #[arg(long, value_parser = parse_feature_set, default_value = "toy4")]
    feature_set: FeatureSet,
    /// Expert weights, comma separated (default: the built-in set).
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    /// RBF bandwidth (default: 1 for toy4, 3 for drive6).
    #[arg(long)]
    sigma: Option<f64>,
    /// Control noise std of the expert.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 24)]
    episode: usize,
    /// Prediction horizon in steps.
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    /// Expert planning horizon (default: rest of the episode).
    #[arg(long)]
    expert_horizon: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    radius: f64,
    /// Write the initial state only, without an expert rollout.
    #[arg(long)]
    no_expert: bool,
}

#[derive(Args, Serialize)]
pub struct HeadOnArgs {
    #[arg(long, default_value_t = 1.5)]
    lateral: f64,
    /// Frame at which the predictions are made.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// ADE of both errant predictions.
    #[arg(long, default_value_t = 0.075)]
    ade: f64,
}

pub fn run(run: &Run, cmd: ScenesCommand) -> CliResult<()> {
    match cmd {
        ScenesCommand::Generate(a) => generate(run, a),
        ScenesCommand::HeadOn(a) => head_on(run, a),
    }
}

fn generate(run: &Run, args: GenerateArgs) -> CliResult<()> {
    let config = run.config("scenes generate", &args);
    let model = build_model(args.feature_set, args.theta.as_deref(), args.sigma, args.horizon)?;
    io::prepare_dir(&run.out)?;
    let seeds: Vec<u64> = (0..args.count).map(|i| run.seed + i).collect();
    run.install(|| {
        seeds.par_iter().try_for_each(|&seed| {
            let spec = ScenarioSpec {
                seed,
                radius: args.radius,
                agents: args.agents,
                feature_set: args.feature_set,
                episode: args.episode,
                horizon: args.horizon,
                ..Default::default()
            };
            let ctx = |e: plansense::Error| CliError::from(e).context(&format!("seed {seed}"));
            let mut scene = generate_scenario(&spec).map_err(ctx)?;
            let expert = ExpertOptions {
                horizon: args.expert_horizon,
                episode: args.episode,
                noise_std: args.noise,
                seed: super::item_seed(seed, 1),
                ..Default::default()
            };
            let mut reached_goal = None;
            if !args.no_expert {
                let r = expert_rollout(&scene, &model, &expert).map_err(ctx)?;
                reached_goal = Some(r.reached_goal);
                scene = r.scene;
            }
            scene.meta = Some(serde_json::json!({
                "config": config,
                "scene_seed": seed,
                "generator": spec,
                "expert": (!args.no_expert).then_some(&expert),
                "theta": model.theta.weights(),
                "sigma": model.rbf.sigma(),
                "reached_goal": reached_goal,
            }));
            let text = scene.to_json().map_err(ctx)? + "\n";
            io::write_atomic(&run.out.join(format!("scene_{seed:06}.json")), text.as_bytes())
        })
    })
}

fn head_on(run: &Run, args: HeadOnArgs) -> CliResult<()> {
    let config = run.config("scenes head-on", &args);
    let spec = HeadOnSpec { lateral: args.lateral, ..Default::default() };
    if args.frame >= spec.steps {
        return Err(CliError::Input(format!("frame must be below {}", spec.steps)));
    }
    let mut scene = head_on_scene(&spec)?;
    let agent = scene.agents.values().next().expect("head-on scene has one agent").clone();
    let id = scene.agents.keys().next().expect("head-on scene has one agent").clone();
    let gt = agent.slice(args.frame + 1, args.frame + 1 + spec.horizon)?;
    let (toward, away) = make_errant_prediction_pair(&gt, scene.ego.points()[args.frame], args.ade)?;
    scene.meta = Some(serde_json::json!({ "config": config, "head_on": spec }));

    io::prepare_dir(&run.out)?;
    io::write_atomic(&run.out.join("scene_headon.json"), (scene.to_json()? + "\n").as_bytes())?;
    for (name, traj) in [("toward", toward), ("away", away)] {
        let dir = run.out.join(name);
        io::prepare_dir(&dir)?;
        let pred = AgentPrediction::single(traj.points().to_vec())?;
        let set = PredictionSet::new(args.frame, spec.horizon, BTreeMap::from([(id.clone(), pred)]))?;
        let doc = serde_json::json!({ "config": config, "predictions": io::raw_json(&set.to_json()?)? });
        io::write_json(&dir.join("scene_headon.json"), &doc)?;
    }
    Ok(())
}
