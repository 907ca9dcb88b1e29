use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use plansense::cost::CostModel;
use plansense::metrics::{
    average_precision, ground_truth_boxes, match_detections, min_ade, min_fde, mixture_nll, pi_average_precision,
    pr_curve, sensitivity_of_detections, sensitivity_of_predictions, tighten_matches, MetricReport, SensitivityReport,
    Striation, WeightingScheme, CSV_HEADER,
};
use plansense::prediction::{AgentPrediction, DetectionSet, PredictionSet};
use plansense::scene::{AgentId, Scene};
use plansense::sim::{perturb_detections, PerturbationSpec};
use plansense::trajectory::constant_velocity_predict;
use rayon::prelude::*;
use serde::Serialize;

use super::item_seed;
use crate::error::{CliError, CliResult};
use crate::io;
use crate::Run;

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pred,
    Det,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Frame at which predictions or detections are made.
    #[arg(long, default_value_t = 1)]
    frame: usize,
    /// Directory of prediction files named after the scenes (default:
    /// constant-velocity predictions from the logged history).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Directory of detection files named after the scenes (default:
    /// logged positions plus Gaussian noise of std `--det-noise`).
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    det_noise: f64,
    #[arg(long, default_value = "hinge", value_parser = parse_scheme)]
    scheme: WeightingScheme,
    /// `quartiles` or comma-separated sensitivity edges.
    #[arg(long)]
    striate: Option<String>,
    /// Match thresholds in meters.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    thresholds: Vec<f64>,
    /// Bandwidth of the Gaussian mixture NLL.
    #[arg(long, default_value_t = 0.5)]
    nll_sigma: f64,
}

fn parse_scheme(s: &str) -> Result<WeightingScheme, String> {
    s.parse().map_err(|e: plansense::Error| e.to_string())
}

pub fn run(run: &Run, args: EvaluateArgs) -> CliResult<()> {
    let config = run.config("evaluate", &args);
    let paths = io::scene_paths(&args.scenes)?;
    io::require_file(&args.model)?;
    for dir in [&args.predictions, &args.detections].into_iter().flatten() {
        if !dir.is_dir() {
            return Err(CliError::Input(format!("{} is not a directory", dir.display())));
        }
    }
    let edges = parse_striation(args.striate.as_deref())?;
    io::prepare_dir(&run.out)?;
    let model = io::load_model(&args.model)?;
    let scenes = io::load_scenes(&paths)?;
    match args.mode {
        Mode::Pred => predictions(run, &args, &config, &model, &scenes, edges.as_ref()),
        Mode::Det => detections(run, &args, &config, &model, &scenes),
    }
}

enum Striate {
    Quartiles,
    Edges(Vec<f64>),
}

fn parse_striation(s: Option<&str>) -> CliResult<Option<Striate>> {
    match s {
        None => Ok(None),
        Some("quartiles") => Ok(Some(Striate::Quartiles)),
        Some(list) => list
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| CliError::Input(format!("--striate {x:?}: {e}"))))
            .collect::<CliResult<Vec<_>>>()
            .map(|v| Some(Striate::Edges(v))),
    }
}

/// Constant-velocity predictions from the history up to `frame`, for every
/// agent whose logged future covers the horizon.
fn cv_predictions(scene: &Scene, frame: usize, horizon: usize) -> plansense::Result<PredictionSet> {
    if frame == 0 {
        return Err(plansense::Error::InvalidInput("constant-velocity predictions need frame >= 1".into()));
    }
    let mut agents = BTreeMap::new();
    for (id, t) in &scene.agents {
        if frame + horizon < t.len() {
            let p = constant_velocity_predict(&t.slice(0, frame + 1)?, horizon)?;
            agents.insert(id.clone(), AgentPrediction::single(p.points().to_vec())?);
        }
    }
    PredictionSet::new(frame, horizon, agents)
}

fn scene_file(dir: &Path, id: &str) -> CliResult<PathBuf> {
    let p = dir.join(format!("{id}.json"));
    io::require_file(&p)?;
    Ok(p)
}

struct PredOutcome {
    ids: Vec<AgentId>,
    values: [Vec<f64>; 3],
    g: Vec<f64>,
    g_gt: Vec<f64>,
    report: SensitivityReport,
}

const PRED_METRICS: [&str; 3] = ["ade", "fde", "nll"];

fn predict_scene(args: &EvaluateArgs, model: &CostModel, id: &str, scene: &Scene) -> CliResult<PredOutcome> {
    let set = match &args.predictions {
        Some(dir) => io::load_predictions(&scene_file(dir, id)?)?,
        None => cv_predictions(scene, args.frame, model.horizon)?,
    };
    // cost weights carry over; only the window length follows the predictions
    let model = CostModel::new(model.theta.clone(), model.rbf, set.horizon)?;
    let report = sensitivity_of_predictions(&model, scene, &scene.ego, &set)?;
    let mut out = PredOutcome {
        ids: Vec::new(),
        values: Default::default(),
        g: Vec::new(),
        g_gt: Vec::new(),
        report,
    };
    for row in &out.report.agents {
        let pred = &set.agents[&row.agent];
        let traj = scene
            .agents
            .get(&row.agent)
            .ok_or_else(|| CliError::Input(format!("prediction for unknown agent {}", row.agent)))?;
        let gt = traj.slice(set.frame + 1, set.frame + 1 + set.horizon)?;
        out.values[0].push(min_ade(pred, gt.points())?);
        out.values[1].push(min_fde(pred, gt.points())?);
        out.values[2].push(mixture_nll(pred, gt.points(), args.nll_sigma)?);
        out.ids.push(AgentId(format!("{id}/{}", row.agent)));
        out.g.push(row.g);
        out.g_gt.push(row.g_gt.unwrap_or(row.g));
    }
    Ok(out)
}

fn predictions(
    run: &Run,
    args: &EvaluateArgs,
    config: &serde_json::Value,
    model: &CostModel,
    scenes: &[(String, Scene)],
    edges: Option<&Striate>,
) -> CliResult<()> {
    let outcomes = run.install(|| {
        scenes
            .par_iter()
            .map(|(id, s)| predict_scene(args, model, id, s).map_err(|e| e.context(id)))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let ids: Vec<AgentId> = outcomes.iter().flat_map(|o| o.ids.clone()).collect();
    if ids.is_empty() {
        return Err(CliError::Input("no agent has a prediction with a logged future".into()));
    }
    let g: Vec<f64> = outcomes.iter().flat_map(|o| o.g.clone()).collect();
    let g_gt: Vec<f64> = outcomes.iter().flat_map(|o| o.g_gt.clone()).collect();
    let mut reports = Vec::new();
    for (k, name) in PRED_METRICS.iter().enumerate() {
        let values: Vec<f64> = outcomes.iter().flat_map(|o| o.values[k].clone()).collect();
        let striation = match edges {
            None => Striation::None,
            Some(Striate::Quartiles) => Striation::Quartiles,
            Some(Striate::Edges(e)) => Striation::Edges(e),
        };
        reports.push(MetricReport::build(name, &ids, &values, &g, Some(&g_gt), args.scheme, striation)?);
    }

    let rows: Vec<String> = reports.iter().flat_map(MetricReport::csv_rows).collect();
    io::write_csv(&run.out.join("metrics.csv"), config, CSV_HEADER, &rows)?;
    if edges.is_some() {
        let rows: Vec<String> = reports
            .iter()
            .flat_map(|r| {
                r.buckets.iter().enumerate().map(move |(i, b)| {
                    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                    format!("{},{i},{},{},{},{},{}", r.metric, b.lo, b.hi, b.count, opt(b.mean), opt(b.ci95))
                })
            })
            .collect();
        io::write_csv(&run.out.join("buckets.csv"), config, "metric,bucket,lo,hi,count,mean,ci95", &rows)?;
    }
    let sensitivity: BTreeMap<&str, &SensitivityReport> =
        scenes.iter().zip(&outcomes).map(|((id, _), o)| (id.as_str(), &o.report)).collect();
    let doc = serde_json::json!({ "config": config, "metrics": reports, "sensitivity": sensitivity });
    io::write_json(&run.out.join("evaluate_pred.json"), &doc)?;
    for r in &reports {
        eprintln!("{}: raw {:.6} pi {:.6}", r.metric, r.raw, r.pi);
    }
    Ok(())
}

#[derive(Serialize)]
struct ThresholdResult {
    threshold: f64,
    ap: Option<f64>,
    pi_ap: Option<f64>,
    /// `(recall, precision)` after each ranked detection.
    pr: Vec<(f64, f64)>,
    pi_pr: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct DetOutcome {
    frame: usize,
    ground_truth: usize,
    sensitivity: SensitivityReport,
    /// Sensitivity of each logged agent when detected exactly; drives the
    /// PI-AP thresholds.
    agent_sensitivity: BTreeMap<AgentId, f64>,
    thresholds: Vec<ThresholdResult>,
}

fn detect_scene(args: &EvaluateArgs, model: &CostModel, seed: u64, index: usize, id: &str, scene: &Scene) -> CliResult<DetOutcome> {
    let dets: DetectionSet = match &args.detections {
        Some(dir) => io::load_detections(&scene_file(dir, id)?)?,
        None => perturb_detections(
            scene,
            args.frame,
            &PerturbationSpec { sigma: args.det_noise, seed: item_seed(seed, index as u64) },
        )?,
    };
    let frame = dets.frame;
    let exact = perturb_detections(scene, frame, &PerturbationSpec { sigma: 0.0, seed: 0 })?;
    let agent_sensitivity = sensitivity_of_detections(model, scene, &scene.ego, &exact)?.by_agent();
    let sensitivity = sensitivity_of_detections(model, scene, &scene.ego, &dets)?;
    let gt = ground_truth_boxes(scene, frame);
    let thresholds = args
        .thresholds
        .iter()
        .map(|&t| {
            let matches = match_detections(&dets, &gt, t)?;
            let mut tight = matches.clone();
            tighten_matches(&mut tight, t, &agent_sensitivity)?;
            Ok(ThresholdResult {
                threshold: t,
                ap: average_precision(&dets, &gt, t)?,
                pi_ap: pi_average_precision(&dets, &gt, t, &agent_sensitivity)?,
                pr: pr_curve(&matches, gt.len()),
                pi_pr: pr_curve(&tight, gt.len()),
            })
        })
        .collect::<plansense::Result<Vec<_>>>()?;
    Ok(DetOutcome { frame, ground_truth: gt.len(), sensitivity, agent_sensitivity, thresholds })
}

fn detections(run: &Run, args: &EvaluateArgs, config: &serde_json::Value, model: &CostModel, scenes: &[(String, Scene)]) -> CliResult<()> {
    let outcomes = run.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, (id, s))| detect_scene(args, model, run.seed, i, id, s).map_err(|e| e.context(id)))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut ap_rows = Vec::new();
    let mut pr_rows = Vec::new();
    for ((id, _), o) in scenes.iter().zip(&outcomes) {
        for t in &o.thresholds {
            ap_rows.push(format!("{id},{},{},{}", t.threshold, opt(t.ap), opt(t.pi_ap)));
            for (kind, curve) in [("ap", &t.pr), ("pi_ap", &t.pi_pr)] {
                for (rank, (r, p)) in curve.iter().enumerate() {
                    pr_rows.push(format!("{id},{},{kind},{rank},{r},{p}", t.threshold));
                }
            }
        }
    }
    let means: Vec<serde_json::Value> = args
        .thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let ap = io::mean(outcomes.iter().filter_map(|o| o.thresholds[k].ap));
            let pi_ap = io::mean(outcomes.iter().filter_map(|o| o.thresholds[k].pi_ap));
            eprintln!("threshold {t}: mean AP {} PI-AP {}", opt(ap), opt(pi_ap));
            serde_json::json!({ "threshold": t, "ap": ap, "pi_ap": pi_ap })
        })
        .collect();
    io::write_csv(&run.out.join("ap.csv"), config, "scene,threshold,ap,pi_ap", &ap_rows)?;
    io::write_csv(&run.out.join("pr.csv"), config, "scene,threshold,kind,rank,recall,precision", &pr_rows)?;
    let per_scene: BTreeMap<&str, &DetOutcome> = scenes.iter().zip(&outcomes).map(|((id, _), o)| (id.as_str(), o)).collect();
    let doc = serde_json::json!({ "config": config, "mean": means, "scenes": per_scene });
    io::write_json(&run.out.join("evaluate_det.json"), &doc)
}
