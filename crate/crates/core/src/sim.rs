//! Synthetic scenes, a receding-horizon expert that optimizes a planted
//! cost, and perturbation generators for evaluation experiments.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::{scene_frames, ControlProblem, CostModel, FeatureSet};
use crate::dynamics::{unicycle_step, unstack_controls, Control, Dynamics};
use crate::error::{Error, Result};
use crate::lane::Lane;
use crate::optim::{minimize_newton, MinimizeOptions};
use crate::prediction::{DetectionBox, DetectionSet};
use crate::planner::stage_one_controls;
use crate::scene::{AgentId, Scene};
use crate::trajectory::{Point, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub seed: u64,
    /// Arena radius in meters.
    pub radius: f64,
    pub agents: usize,
    /// Agent speed range in m/s.
    pub agent_speed: (f64, f64),
    /// Initial ego speed range in m/s (extended dynamics only).
    pub ego_speed: (f64, f64),
    pub feature_set: FeatureSet,
    pub dt: f64,
    /// Episode length in steps.
    pub episode: usize,
    /// Prediction horizon in steps.
    pub horizon: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            radius: 5.0,
            agents: 2,
            agent_speed: (0.5, 1.5),
            ego_speed: (1.0, 2.0),
            feature_set: FeatureSet::Toy4,
            dt: 0.5,
            episode: 40,
            horizon: 4,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.agent_speed;
        let (elo, ehi) = self.ego_speed;
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::InvalidInput(format!("arena radius must be positive, got {}", self.radius)));
        }
        if !(lo >= 0.0 && hi >= lo && hi.is_finite() && elo >= 0.0 && ehi >= elo && ehi.is_finite()) {
            return Err(Error::InvalidInput("speed ranges must be ordered and non-negative".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) || self.episode == 0 || self.horizon == 0 {
            return Err(Error::InvalidInput("dt, episode and horizon must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Scene with only the initial ego state; the expert fills in the rest.
///
/// The ego starts on the annulus `[R/2, R]` facing the origin (the goal)
/// within ±45°. Agents move on straight constant-velocity tracks through
/// the inner half of the arena, long enough to cover the episode plus one
/// prediction horizon. Driving scenes get a single straight lane from the
/// ego start through the goal.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = rng.random_range(0.5 * spec.radius..=spec.radius);
    let bearing = rng.random_range(-PI..PI);
    let start = r * Point::new(bearing.cos(), bearing.sin());
    let toward = (-start.y).atan2(-start.x);
    let heading = toward + rng.random_range(-FRAC_PI_4..FRAC_PI_4);
    let dynamics = spec.feature_set.dynamics();
    let speed = match dynamics {
        Dynamics::Unicycle => None,
        Dynamics::ExtendedUnicycle => Some(vec![uniform(&mut rng, spec.ego_speed)]),
    };
    let ego = Trajectory::with_states(spec.dt, vec![start], Some(vec![heading]), speed)?;

    let len = spec.episode + 1 + spec.horizon;
    let mut agents = BTreeMap::new();
    for a in 0..spec.agents {
        let c = {
            let rho = 0.5 * spec.radius * rng.random_range(0.0f64..1.0).sqrt();
            let phi = rng.random_range(-PI..PI);
            rho * Point::new(phi.cos(), phi.sin())
        };
        let dir = rng.random_range(-PI..PI);
        let v = uniform(&mut rng, spec.agent_speed) * spec.dt * Point::new(dir.cos(), dir.sin());
        let cross = rng.random_range(0..=spec.episode) as f64;
        let points = (0..len).map(|i| c + v * (i as f64 - cross)).collect();
        agents.insert(AgentId(format!("agent{a}")), Trajectory::new(spec.dt, points)?);
    }

    let lanes = match spec.feature_set {
        FeatureSet::Toy4 => Vec::new(),
        FeatureSet::Drive6 => {
            let dir = -start / r;
            vec![Lane::straight(start - 2.0 * spec.radius * dir, 2.0 * spec.radius * dir)?]
        }
    };
    let mut scene = Scene::new(spec.dt, spec.horizon, Point::zeros(), ego, agents, lanes)?;
    scene.meta = Some(serde_json::json!({ "generator": spec }));
    Ok(scene)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertOptions {
    /// Planning horizon in steps; `None` plans to the end of the episode.
    pub horizon: Option<usize>,
    pub episode: usize,
    /// Standard deviation of the additive Gaussian noise on each applied
    /// control component.
    pub noise_std: f64,
    pub seed: u64,
    /// Stop once the ego is this close to the goal.
    pub stop_radius: Option<f64>,
    pub max_iters: usize,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self {
            horizon: None,
            episode: 40,
            noise_std: 0.05,
            seed: 0,
            stop_radius: None,
            max_iters: 200,
        }
    }
}

impl ExpertOptions {
    /// Noiseless planning to the end of the episode: the setting whose
    /// trajectories a single whole-episode optimization reproduces.
    pub fn noiseless(episode: usize) -> Self {
        Self {
            episode,
            noise_std: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertRollout {
    /// Input scene with the ego trajectory replaced by the rollout.
    pub scene: Scene,
    pub controls: Vec<Control>,
    /// Planned cost at each replanning step.
    pub plan_costs: Vec<f64>,
    pub reached_goal: bool,
}

/// Solves the planning problem from `initial` over `frames` by damped
/// Newton, warm-started from `guess`.
pub(crate) fn solve_controls(problem: &ControlProblem, guess: &[Control], max_iters: usize) -> Result<(Vec<Control>, f64, bool)> {
    let x0 = ControlProblem::stack(guess);
    let r = minimize_newton(
        x0,
        |x| problem.cost(&unstack_controls(x)),
        |x| {
            let d = problem.grad_hess(&unstack_controls(x))?;
            Ok((d.value, d.gradient, d.hessian))
        },
        MinimizeOptions {
            max_iters,
            rel_tol: 1e-12,
            grad_tol: 1e-9,
        },
    )?;
    if !r.value.is_finite() {
        return Err(Error::Divergence("planner cost is not finite".into()));
    }
    Ok((unstack_controls(&r.x), r.value, r.converged))
}

/// Receding-horizon expert: plan, apply the first control plus noise,
/// repeat. Each plan is warm-started from the previous one; the first
/// driving plan starts from the lane-following least-squares solution used
/// by [`crate::planner::reoptimize`], so both land in the same basin.
pub fn expert_rollout(scene: &Scene, model: &CostModel, options: &ExpertOptions) -> Result<ExpertRollout> {
    if options.episode == 0 {
        return Err(Error::InvalidInput("episode must have at least one step".into()));
    }
    if !(options.noise_std >= 0.0) {
        return Err(Error::InvalidInput("noise std must be non-negative".into()));
    }
    let dynamics = model.dynamics;
    let noise = Normal::new(0.0, options.noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut state = scene.ego_state(0)?;
    if dynamics == Dynamics::Unicycle {
        state.speed = 0.0;
    }
    let mut states = vec![state];
    let mut controls = Vec::new();
    let mut plan_costs = Vec::new();
    let mut plan: Vec<Control> = Vec::new();
    let mut reached_goal = false;
    for tau in 0..options.episode {
        if let Some(r) = options.stop_radius {
            if (state.position() - scene.goal).norm() <= r {
                reached_goal = true;
                break;
            }
        }
        let steps = options.horizon.map_or(options.episode - tau, |h| h.min(options.episode - tau).max(1));
        let frames = scene_frames(scene, tau, steps, model.horizon)?;
        let problem = ControlProblem::new(model.clone(), state, frames, scene.lanes.clone(), scene.goal, scene.dt)?;
        let mut guess: Vec<Control> = if tau == 0 && model.feature_set() == FeatureSet::Drive6 && !scene.lanes.is_empty() {
            stage_one_controls(scene, model, &state, steps)?
        } else {
            plan.iter().skip(1).copied().collect()
        };
        guess.truncate(steps);
        while guess.len() < steps {
            guess.push(guess.last().copied().unwrap_or(Control::new(0.0, 0.0)));
        }
        let (best, value, _) = solve_controls(&problem, &guess, options.max_iters)?;
        plan_costs.push(value);
        let mut u = best[0];
        if options.noise_std > 0.0 {
            u.longitudinal += noise.sample(&mut rng);
            u.yaw_rate += noise.sample(&mut rng);
        }
        state = unicycle_step(dynamics, &state, &u, scene.dt)?;
        states.push(state);
        controls.push(u);
        plan = best;
    }
    if let Some(r) = options.stop_radius {
        reached_goal |= (state.position() - scene.goal).norm() <= r;
    }
    let ego = Trajectory::from_states(scene.dt, &states, dynamics == Dynamics::ExtendedUnicycle)?;
    let mut out = scene.clone();
    out.ego = ego;
    Ok(ExpertRollout {
        scene: out,
        controls,
        plan_costs,
        reached_goal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Per-coordinate noise standard deviation in meters.
    pub sigma: f64,
    pub seed: u64,
}

/// Box footprint used for synthetic detections.
pub const BOX_WIDTH: f64 = 1.8;
pub const BOX_LENGTH: f64 = 4.5;

/// Detections of every agent present at `frame`, with centers offset by
/// iid Gaussian noise. Scores fall with the offset so better boxes rank
/// first.
pub fn perturb_detections(scene: &Scene, frame: usize, spec: &PerturbationSpec) -> Result<DetectionSet> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("noise std must be non-negative, got {}", spec.sigma)));
    }
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut boxes = Vec::new();
    for (id, traj) in &scene.agents {
        if frame >= traj.len() {
            continue;
        }
        let p = traj.points()[frame];
        let offset = if spec.sigma > 0.0 {
            Point::new(noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            Point::zeros()
        };
        let v = if frame + 1 < traj.len() {
            traj.points()[frame + 1] - p
        } else {
            traj.last_step_velocity()
        };
        let heading = if v.norm() > 0.0 { v.y.atan2(v.x) } else { 0.0 };
        let c = p + offset;
        boxes.push(DetectionBox {
            x: c.x,
            y: c.y,
            width: BOX_WIDTH,
            length: BOX_LENGTH,
            heading,
            score: 1.0 / (1.0 + offset.norm()),
            agent: Some(id.clone()),
        });
    }
    DetectionSet::new(frame, boxes)
}

/// Two predictions with identical displacement errors: waypoint `t` of the
/// ground truth (`t = 0..T`) is moved `2·a·t/(T−1)` meters toward the ego
/// position, or the same distance away from it. The offsets ramp from zero
/// to `2a`, so ADE is `a` and FDE is `2a`. A single waypoint is moved by `a`.
pub fn make_errant_prediction_pair(gt_future: &Trajectory, ego_position: Point, ade_target: f64) -> Result<(Trajectory, Trajectory)> {
    if !(ade_target > 0.0 && ade_target.is_finite()) {
        return Err(Error::InvalidInput(format!("ade target must be positive, got {ade_target}")));
    }
    let n = gt_future.len();
    let mut toward = Vec::with_capacity(gt_future.len());
    let mut away = Vec::with_capacity(gt_future.len());
    for (i, p) in gt_future.points().iter().enumerate() {
        let d = ego_position - p;
        let norm = d.norm();
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!("ego coincides with waypoint {i}")));
        }
        let scale = if n == 1 { ade_target } else { 2.0 * ade_target * i as f64 / (n - 1) as f64 };
        let offset = d * (scale / norm);
        toward.push(p + offset);
        away.push(p - offset);
    }
    Ok((Trajectory::new(gt_future.dt(), toward)?, Trajectory::new(gt_future.dt(), away)?))
}

/// Head-on encounter for the asymmetry experiment: the ego drives along the
/// x axis toward a goal ahead while an agent approaches in the opposite
/// direction on a parallel track `lateral` meters to the side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadOnSpec {
    pub lateral: f64,
    pub ego_speed: f64,
    pub agent_speed: f64,
    /// Initial gap along x between ego and agent, meters.
    pub gap: f64,
    pub dt: f64,
    pub steps: usize,
    pub horizon: usize,
}

impl Default for HeadOnSpec {
    fn default() -> Self {
        Self {
            lateral: 1.5,
            ego_speed: 0.5,
            agent_speed: 0.5,
            gap: 4.0,
            dt: 0.5,
            steps: 16,
            horizon: 8,
        }
    }
}

pub fn head_on_scene(spec: &HeadOnSpec) -> Result<Scene> {
    let n = spec.steps + spec.horizon + 1;
    let ego_points: Vec<Point> = (0..n).map(|i| Point::new(spec.ego_speed * spec.dt * i as f64, 0.0)).collect();
    let ego = Trajectory::with_states(spec.dt, ego_points, Some(vec![0.0; n]), None)?;
    let agent = (0..n)
        .map(|i| Point::new(spec.gap - spec.agent_speed * spec.dt * i as f64, spec.lateral))
        .collect();
    let mut agents = BTreeMap::new();
    agents.insert(AgentId::from("oncoming"), Trajectory::new(spec.dt, agent)?);
    let goal = Point::new(spec.ego_speed * spec.dt * n as f64, 0.0);
    let mut scene = Scene::new(spec.dt, spec.horizon, goal, ego, agents, Vec::new())?;
    scene.meta = Some(serde_json::json!({ "head_on": spec }));
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{RbfParams, Theta};
    use crate::metrics::{ade, fde};

    fn toy_model() -> CostModel {
        CostModel::new(Theta::new(FeatureSet::Toy4, vec![1.0, 4.0, 0.4, 0.4]).unwrap(), RbfParams::new(1.0).unwrap(), 4).unwrap()
    }

    #[test]
    fn no_agents_gives_empty_map() {
        let s = generate_scenario(&ScenarioSpec { agents: 0, ..Default::default() }).unwrap();
        assert!(s.agents.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = ScenarioSpec { seed: 11, agents: 3, ..Default::default() };
        assert_eq!(generate_scenario(&spec).unwrap(), generate_scenario(&spec).unwrap());
    }

    #[test]
    fn starts_lie_on_the_annulus() {
        for seed in 0..1000 {
            let spec = ScenarioSpec { seed, agents: 0, ..Default::default() };
            let s = generate_scenario(&spec).unwrap();
            let r = s.ego.points()[0].norm();
            assert!((2.5 - 1e-12..=5.0 + 1e-12).contains(&r), "seed {seed}: r = {r}");
        }
    }

    #[test]
    fn drive_scenes_have_lanes_and_speed() {
        let spec = ScenarioSpec { feature_set: FeatureSet::Drive6, ..Default::default() };
        let s = generate_scenario(&spec).unwrap();
        assert_eq!(s.lanes.len(), 1);
        assert!(s.ego.speeds().is_some());
        assert_eq!(s.agents.values().next().unwrap().len(), 40 + 1 + 4);
    }

    #[test]
    fn expert_reaches_goal_without_agents() {
        let ego = Trajectory::with_states(0.5, vec![Point::new(2.0, 0.0)], Some(vec![PI]), None).unwrap();
        let scene = Scene::new(0.5, 4, Point::zeros(), ego, BTreeMap::new(), vec![]).unwrap();
        let r = expert_rollout(&scene, &toy_model(), &ExpertOptions { noise_std: 0.0, stop_radius: Some(0.1), ..Default::default() }).unwrap();
        assert!(r.reached_goal);
        assert!(r.scene.ego.last().norm() <= 0.1);
    }

    #[test]
    fn expert_keeps_clear_of_a_parked_agent() {
        let ego = Trajectory::with_states(0.5, vec![Point::new(4.0, 0.0)], Some(vec![PI]), None).unwrap();
        let parked = Trajectory::new(0.5, vec![Point::new(2.0, 0.05); 60]).unwrap();
        let mut agents = BTreeMap::new();
        agents.insert(AgentId::from("parked"), parked);
        let scene = Scene::new(0.5, 4, Point::zeros(), ego, agents, vec![]).unwrap();
        let r = expert_rollout(&scene, &toy_model(), &ExpertOptions { noise_std: 0.0, stop_radius: Some(0.1), ..Default::default() }).unwrap();
        let agent = Point::new(2.0, 0.05);
        let clearance = r.scene.ego.points().iter().map(|p| (p - agent).norm()).fold(f64::INFINITY, f64::min);
        // the straight segment from start to goal passes 0.05 m from the agent
        assert!(clearance >= 0.05, "clearance {clearance}");
    }

    #[test]
    fn noiseless_expert_cost_decreases() {
        let ego = Trajectory::with_states(0.5, vec![Point::new(3.0, 1.0)], Some(vec![PI]), None).unwrap();
        let scene = Scene::new(0.5, 4, Point::zeros(), ego, BTreeMap::new(), vec![]).unwrap();
        let r = expert_rollout(&scene, &toy_model(), &ExpertOptions { noise_std: 0.0, stop_radius: Some(0.1), ..Default::default() }).unwrap();
        for w in r.plan_costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn zero_noise_detections_match_ground_truth() {
        let scene = generate_scenario(&ScenarioSpec { agents: 3, ..Default::default() }).unwrap();
        let d = perturb_detections(&scene, 2, &PerturbationSpec { sigma: 0.0, seed: 1 }).unwrap();
        for (b, traj) in d.boxes.iter().zip(scene.agents.values()) {
            assert_eq!(b.center(), traj.points()[2]);
        }
        let spec = PerturbationSpec { sigma: 0.5, seed: 9 };
        assert_eq!(perturb_detections(&scene, 2, &spec).unwrap(), perturb_detections(&scene, 2, &spec).unwrap());
    }

    #[test]
    fn detection_noise_is_centered() {
        let scene = generate_scenario(&ScenarioSpec { agents: 1, ..Default::default() }).unwrap();
        let truth = scene.agents.values().next().unwrap().points()[0];
        let sigma = 0.8;
        let n = 10_000;
        let mut mean = Point::zeros();
        for seed in 0..n {
            let d = perturb_detections(&scene, 0, &PerturbationSpec { sigma, seed }).unwrap();
            mean += d.boxes[0].center() - truth;
        }
        mean /= n as f64;
        assert!(mean.x.abs() <= 3.0 * sigma / 100.0 && mean.y.abs() <= 3.0 * sigma / 100.0, "{mean:?}");
    }

    #[test]
    fn errant_pair_single_waypoint() {
        let gt = Trajectory::new(0.5, vec![Point::new(0.0, 2.0)]).unwrap();
        let (t, a) = make_errant_prediction_pair(&gt, Point::zeros(), 0.5).unwrap();
        assert!((t.points()[0] - Point::new(0.0, 1.5)).norm() < 1e-15);
        assert!((a.points()[0] - Point::new(0.0, 2.5)).norm() < 1e-15);
    }

    #[test]
    fn errant_pair_has_equal_errors() {
        let gt = Trajectory::new(0.5, (0..6).map(|i| Point::new(3.0 - 0.4 * i as f64, 1.3)).collect()).unwrap();
        let (t, a) = make_errant_prediction_pair(&gt, Point::new(0.2, 0.1), 0.075).unwrap();
        let (at, aa) = (ade(&t, &gt).unwrap(), ade(&a, &gt).unwrap());
        let (ft, fa) = (fde(&t, &gt).unwrap(), fde(&a, &gt).unwrap());
        assert!((at - aa).abs() <= 4.0 * f64::EPSILON * at);
        assert!((ft - fa).abs() <= 4.0 * f64::EPSILON * ft);
        assert!((ft - 0.15).abs() < 1e-12);
        assert!((at - 0.075).abs() < 1e-12);
        assert!(make_errant_prediction_pair(&gt, gt.points()[2], 0.1).is_err());
    }
}
