//! Planning cost around one evaluation frame, as a function of the
//! evaluated model outputs (predicted waypoints or detected positions).
//!
//! Prediction windows accumulate the cost over the `T` frames the
//! prediction covers. At window step `j > 0` the agent's current position
//! is its mode-averaged predicted waypoint and its prediction is the
//! remainder of each mode. Detection windows cover the evaluation frame
//! only; each detection gets a constant-velocity future seeded at its
//! center.

use std::collections::BTreeMap;

use super::expansion::{expand_step, AgentFrame, FeatureContext, Need, PointExpr, PointRef, StepSpec, Tables, Var};
use super::CostModel;
use crate::error::{Error, Result};
use crate::prediction::{AgentPrediction, DetectionSet, PredictionSet};
use crate::scene::{AgentId, Scene};
use crate::trajectory::{Point, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Prediction,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Current(usize),
    Waypoint { agent: usize, mode: usize, step: usize },
}

/// Gradient of the window cost with respect to one agent's evaluated
/// outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGradient {
    /// Agent id, or `det<i>` for an unmatched detection.
    pub agent: AgentId,
    /// With respect to the current (detected) position.
    pub current: Point,
    /// `waypoints[k][i]`: with respect to waypoint `i` of mode `k`.
    pub waypoints: Vec<Vec<Point>>,
}

impl AgentGradient {
    /// Euclidean norm of the stacked gradient over the evaluated outputs:
    /// waypoints for predictions, the position for detections.
    pub fn magnitude(&self, kind: WindowKind) -> f64 {
        match kind {
            WindowKind::Prediction => self.waypoints.iter().flatten().map(|g| g.norm_squared()).sum::<f64>().sqrt(),
            WindowKind::Detection => self.current.norm(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensitivityWindow {
    kind: WindowKind,
    model: CostModel,
    scene_lanes: Vec<crate::lane::Lane>,
    goal: Point,
    ego_positions: Vec<Point>,
    ego_headings: Vec<f64>,
    agent_points: Vec<Point>,
    slots: Vec<Slot>,
    agent_ids: Vec<AgentId>,
    mode_shapes: Vec<(usize, usize)>,
    steps: Vec<StepSpec>,
}

/// Ego positions/headings for steps `frame - 1 ..= frame + extra`, index 0
/// being `frame - 1`. Missing history is extrapolated backwards.
fn ego_tables(plan: &Trajectory, frame: usize, extra: usize) -> Result<(Vec<Point>, Vec<f64>)> {
    let headings = plan
        .headings()
        .ok_or_else(|| Error::InvalidInput("ego plan needs headings".into()))?;
    if frame >= plan.len() {
        return Err(Error::InvalidInput(format!("frame {frame} is past the ego plan ({} steps)", plan.len())));
    }
    let previous = if frame > 0 {
        plan.points()[frame - 1]
    } else if let Some(v) = plan.speeds() {
        let (s, c) = headings[0].sin_cos();
        plan.points()[0] - v[0] * plan.dt() * Point::new(c, s)
    } else if plan.len() > 1 {
        2.0 * plan.points()[0] - plan.points()[1]
    } else {
        plan.points()[0]
    };
    let mut pos = vec![previous];
    let mut head = vec![headings[frame.saturating_sub(1)]];
    for i in frame..=frame + extra {
        pos.push(plan.position_at(i));
        head.push(headings[i.min(plan.len() - 1)]);
    }
    Ok((pos, head))
}

impl SensitivityWindow {
    /// Window over the prediction horizon for predictions made at
    /// `predictions.frame`. Agents missing from the scene at that frame get
    /// no reactive term at the first step.
    pub fn for_predictions(model: &CostModel, scene: &Scene, plan: &Trajectory, predictions: &PredictionSet) -> Result<Self> {
        let t = predictions.frame;
        let horizon = predictions.horizon;
        let (ego_positions, ego_headings) = ego_tables(plan, t, 2 * horizon)?;
        let mut w = Self::empty(WindowKind::Prediction, model, scene, ego_positions, ego_headings);

        let mut agents = Vec::new();
        for (a, (id, pred)) in predictions.agents.iter().enumerate() {
            w.agent_ids.push(id.clone());
            w.mode_shapes.push((pred.modes().len(), horizon));
            let current = scene
                .agents
                .get(id)
                .filter(|traj| t < traj.len())
                .map(|traj| w.push_slot(traj.points()[t], Slot::Current(a)));
            let waypoints: Vec<Vec<PointRef>> = pred
                .modes()
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    m.iter()
                        .enumerate()
                        .map(|(i, &p)| w.push_ref(p, Slot::Waypoint { agent: a, mode: k, step: i }))
                        .collect()
                })
                .collect();
            agents.push((current, waypoints, pred.probs().to_vec()));
        }

        for j in 0..horizon {
            let frames = agents
                .iter()
                .map(|(current, waypoints, probs)| {
                    let cur = if j == 0 {
                        current.clone()
                    } else {
                        Some(PointExpr::combination(
                            waypoints.iter().zip(probs).map(|(m, &p)| (m[j - 1], p)).collect(),
                        ))
                    };
                    AgentFrame {
                        current: cur,
                        modes: waypoints.iter().map(|m| m[j..].iter().map(|&r| PointExpr::of(r)).collect()).collect(),
                        probs: probs.clone(),
                    }
                })
                .collect();
            w.steps.push(StepSpec {
                ego: j + 1,
                control: None,
                agents: frames,
            });
        }
        Ok(w)
    }

    /// Same window with every agent's prediction replaced by its logged
    /// future.
    pub fn for_ground_truth(model: &CostModel, scene: &Scene, plan: &Trajectory, predictions: &PredictionSet) -> Result<Self> {
        let gt = ground_truth_predictions(scene, predictions.frame, predictions.horizon, predictions.agents.keys())?;
        Self::for_predictions(model, scene, plan, &gt)
    }

    /// Single-frame window at `detections.frame`.
    pub fn for_detections(model: &CostModel, scene: &Scene, plan: &Trajectory, detections: &DetectionSet) -> Result<Self> {
        let t = detections.frame;
        let horizon = model.horizon;
        let (ego_positions, ego_headings) = ego_tables(plan, t, horizon + 1)?;
        let mut w = Self::empty(WindowKind::Detection, model, scene, ego_positions, ego_headings);
        let mut frames = Vec::new();
        for (a, b) in detections.boxes.iter().enumerate() {
            let velocity = b
                .agent
                .as_ref()
                .and_then(|id| scene.agents.get(id))
                .map_or(Point::zeros(), |traj| step_velocity(traj, t));
            w.agent_ids.push(b.agent.clone().unwrap_or_else(|| AgentId(format!("det{a}"))));
            w.mode_shapes.push((0, 0));
            let cur = w.push_slot(b.center(), Slot::Current(a));
            let mode = (1..=horizon).map(|i| cur.clone().plus_offset(velocity * i as f64)).collect();
            frames.push(AgentFrame {
                current: Some(cur),
                modes: vec![mode],
                probs: vec![1.0],
            });
        }
        w.steps.push(StepSpec {
            ego: 1,
            control: None,
            agents: frames,
        });
        Ok(w)
    }

    fn empty(kind: WindowKind, model: &CostModel, scene: &Scene, ego_positions: Vec<Point>, ego_headings: Vec<f64>) -> Self {
        Self {
            kind,
            model: model.clone(),
            scene_lanes: scene.lanes.clone(),
            goal: scene.goal,
            ego_positions,
            ego_headings,
            agent_points: Vec::new(),
            slots: Vec::new(),
            agent_ids: Vec::new(),
            mode_shapes: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn push_ref(&mut self, p: Point, slot: Slot) -> PointRef {
        self.agent_points.push(p);
        self.slots.push(slot);
        PointRef::Agent(self.agent_points.len() - 1)
    }

    fn push_slot(&mut self, p: Point, slot: Slot) -> PointExpr {
        PointExpr::of(self.push_ref(p, slot))
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    fn context(&self) -> FeatureContext<'_> {
        FeatureContext {
            feature_set: self.model.feature_set(),
            sigma: self.model.rbf.sigma(),
            lanes: &self.scene_lanes,
            goal: self.goal,
        }
    }

    fn tables(&self) -> Tables<'_> {
        Tables {
            ego_positions: &self.ego_positions,
            ego_headings: &self.ego_headings,
            agent_points: &self.agent_points,
        }
    }

    /// Window cost (control effort excluded).
    pub fn cost(&self) -> Result<f64> {
        let ctx = self.context();
        let tables = self.tables();
        let theta = self.model.theta.weights();
        let mut total = 0.0;
        for step in &self.steps {
            for (f, term) in expand_step(&ctx, &tables, step, Need::Value)? {
                total += theta[f] * term.value;
            }
        }
        Ok(total)
    }

    /// Analytic gradient with respect to every evaluated agent output.
    pub fn gradient(&self) -> Result<Vec<AgentGradient>> {
        let ctx = self.context();
        let tables = self.tables();
        let theta = self.model.theta.weights();
        let mut flat = vec![Point::zeros(); self.agent_points.len()];
        for step in &self.steps {
            for (f, term) in expand_step(&ctx, &tables, step, Need::Gradient)? {
                for (v, g) in term.vars.iter().zip(&term.grad) {
                    match *v {
                        Var::AgentX(s) => flat[s].x += theta[f] * g,
                        Var::AgentY(s) => flat[s].y += theta[f] * g,
                        _ => {}
                    }
                }
            }
        }
        let mut out: Vec<AgentGradient> = self
            .agent_ids
            .iter()
            .zip(&self.mode_shapes)
            .map(|(id, &(k, t))| AgentGradient {
                agent: id.clone(),
                current: Point::zeros(),
                waypoints: vec![vec![Point::zeros(); t]; k],
            })
            .collect();
        for (slot, g) in self.slots.iter().zip(flat) {
            match *slot {
                Slot::Current(a) => out[a].current = g,
                Slot::Waypoint { agent, mode, step } => out[agent].waypoints[mode][step] = g,
            }
        }
        Ok(out)
    }

    /// Copy with one evaluated output moved; used by finite-difference
    /// checks.
    pub fn perturbed(&self, agent: usize, target: Option<(usize, usize)>, delta: Point) -> Self {
        let mut w = self.clone();
        for (s, slot) in self.slots.iter().enumerate() {
            let hit = match (*slot, target) {
                (Slot::Current(a), None) => a == agent,
                (Slot::Waypoint { agent: a, mode, step }, Some((k, i))) => a == agent && mode == k && step == i,
                _ => false,
            };
            if hit {
                w.agent_points[s] += delta;
            }
        }
        w
    }
}

fn step_velocity(traj: &Trajectory, t: usize) -> Point {
    if traj.len() < 2 {
        Point::zeros()
    } else if t >= 1 {
        traj.position_at(t) - traj.position_at(t - 1)
    } else {
        traj.points()[1] - traj.points()[0]
    }
}

/// Logged futures `t+1 ..= t+horizon` for the given agents, extrapolated at
/// constant velocity past the end of each track.
pub fn ground_truth_predictions<'a>(
    scene: &Scene,
    frame: usize,
    horizon: usize,
    ids: impl IntoIterator<Item = &'a AgentId>,
) -> Result<PredictionSet> {
    let mut agents = BTreeMap::new();
    for id in ids {
        let traj = scene
            .agents
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("agent {id} not in scene")))?;
        let future = (frame + 1..=frame + horizon).map(|i| traj.position_at(i)).collect();
        agents.insert(id.clone(), AgentPrediction::single(future)?);
    }
    PredictionSet::new(frame, horizon, agents)
}
