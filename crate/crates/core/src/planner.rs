//! Two-stage plan reoptimization of a logged ego trajectory under the
//! driving cost.
//!
//! Stage 1 solves a linear least-squares problem over future positions:
//! lane offset, heading and goal terms plus control effort, all linearized
//! about a constant-velocity rollout of the initial state. Its positions are
//! converted to controls by inverting the dynamics. Stage 2 refines those
//! controls on the full nonlinear cost.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::Serialize;

use crate::cioc::episode_problem;
use crate::cost::{CostModel, FeatureSet};
use crate::dynamics::{wrap_angle, Control, Dynamics, EgoState};
use crate::error::{Error, Result};
use crate::lane::project_to_lane;
use crate::scene::Scene;
use crate::sim::solve_controls;
use crate::trajectory::{Point, Trajectory};

pub const MAX_REFINE_ITERS: usize = 500;

#[derive(Debug, Clone)]
pub struct ReoptResult {
    pub trajectory: Trajectory,
    pub controls: Vec<Control>,
    /// Full objective at the stage-1 controls.
    pub stage1_objective: f64,
    pub stage2_objective: f64,
    pub converged: bool,
    /// Why refinement was abandoned, if it was; the stage-1 plan is kept.
    pub stage2_error: Option<String>,
    pub max_x: f64,
    pub max_y: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReoptSummary {
    pub stage1_objective: f64,
    pub stage2_objective: f64,
    pub converged: bool,
    pub stage2_error: Option<String>,
    pub max_x: f64,
    pub max_y: f64,
    pub states: Vec<[f64; 4]>,
    pub controls: Vec<[f64; 2]>,
}

impl ReoptResult {
    pub fn summary(&self) -> ReoptSummary {
        let h = self.trajectory.headings().unwrap_or(&[]);
        let v = self.trajectory.speeds();
        ReoptSummary {
            stage1_objective: self.stage1_objective,
            stage2_objective: self.stage2_objective,
            converged: self.converged,
            stage2_error: self.stage2_error.clone(),
            max_x: self.max_x,
            max_y: self.max_y,
            states: self
                .trajectory
                .points()
                .iter()
                .enumerate()
                .map(|(i, p)| [p.x, p.y, h.get(i).copied().unwrap_or(0.0), v.map_or(0.0, |v| v[i])])
                .collect(),
            controls: self.controls.iter().map(|u| [u.longitudinal, u.yaw_rate]).collect(),
        }
    }
}

/// Per-axis maximum absolute deviation.
pub fn reopt_error(trajectory: &Trajectory, gt: &Trajectory) -> Result<(f64, f64)> {
    if trajectory.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "reoptimized trajectory",
            expected: gt.len(),
            got: trajectory.len(),
        });
    }
    Ok(trajectory
        .points()
        .iter()
        .zip(gt.points())
        .fold((0.0f64, 0.0f64), |(mx, my), (a, b)| (mx.max((a.x - b.x).abs()), my.max((a.y - b.y).abs()))))
}

/// Linear residual `Σ c_k · p_k + r` over positions `p_0 ..= p_{N+1}`.
struct Residual {
    weight: f64,
    terms: Vec<(usize, Vector2<f64>)>,
    constant: f64,
}

/// Positions `p_2 ..= p_{N+1}` minimizing the quadratic surrogate.
/// `p_{N+1}` only fixes the heading of the last state.
fn stage_one_positions(scene: &Scene, model: &CostModel, initial: &EgoState, steps: usize) -> Result<Vec<Point>> {
    let theta = model.theta.weights();
    let dt = scene.dt;
    let (s, c) = initial.heading.sin_cos();
    let p0 = initial.position();
    let p1 = p0 + initial.speed * dt * Point::new(c, s);
    let reference_step = (initial.speed.abs() * dt).max(0.1 * dt);
    let reference = |j: usize| p0 + j as f64 * initial.speed * dt * Point::new(c, s);

    let mut residuals = Vec::new();
    for j in 1..=steps {
        let (proj, _) = project_to_lane(&reference(j), &scene.lanes)?;
        let (ls, lc) = proj.heading.sin_cos();
        let tangent = Vector2::new(lc, ls);
        let normal = Vector2::new(-ls, lc);

        residuals.push(Residual {
            weight: theta[0],
            terms: vec![(j, normal)],
            constant: -normal.dot(&proj.point),
        });
        // heading of state j from the step it takes next
        residuals.push(Residual {
            weight: theta[1],
            terms: vec![(j + 1, normal / reference_step), (j, -normal / reference_step)],
            constant: 0.0,
        });
        for axis in [Vector2::x(), Vector2::y()] {
            residuals.push(Residual {
                weight: theta[2],
                terms: vec![(j, axis)],
                constant: -axis.dot(&scene.goal),
            });
        }
        // control j-1 as the second difference around p_j
        let accel = tangent / (dt * dt);
        let turn = normal / (reference_step * dt);
        for dir in [accel, turn] {
            residuals.push(Residual {
                weight: theta[4],
                terms: vec![(j + 1, dir), (j, -2.0 * dir), (j - 1, dir)],
                constant: 0.0,
            });
        }
    }

    let n = 2 * steps;
    let mut normal_matrix = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for r in residuals {
        let mut a = DVector::<f64>::zeros(n);
        let mut b = -r.constant;
        for (k, coeff) in r.terms {
            match k {
                0 => b -= coeff.dot(&p0),
                1 => b -= coeff.dot(&p1),
                _ => {
                    a[2 * (k - 2)] += coeff.x;
                    a[2 * (k - 2) + 1] += coeff.y;
                }
            }
        }
        normal_matrix += r.weight * &a * a.transpose();
        rhs += r.weight * b * a;
    }
    for i in 0..n {
        normal_matrix[(i, i)] += 1e-9;
    }
    let z = normal_matrix
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_pivot: 0.0 })?
        .solve(&rhs);
    let mut out = vec![p0, p1];
    out.extend((0..steps).map(|k| Point::new(z[2 * k], z[2 * k + 1])));
    Ok(out)
}

/// Extended-unicycle controls whose rollout from `initial` passes through
/// `positions[1..]`.
fn controls_through(initial: &EgoState, positions: &[Point], dt: f64) -> Vec<Control> {
    let mut heading = initial.heading;
    let mut speed = initial.speed;
    (1..positions.len() - 1)
        .map(|j| {
            let d = positions[j + 1] - positions[j];
            let next_speed = d.norm() / dt;
            let next_heading = if d.norm() > 1e-12 { d.y.atan2(d.x) } else { heading };
            let u = Control::new((next_speed - speed) / dt, wrap_angle(next_heading - heading) / dt);
            heading = next_heading;
            speed = next_speed;
            u
        })
        .collect()
}

/// Stage-1 controls for `steps` steps from `initial`.
pub(crate) fn stage_one_controls(scene: &Scene, model: &CostModel, initial: &EgoState, steps: usize) -> Result<Vec<Control>> {
    let positions = stage_one_positions(scene, model, initial, steps)?;
    Ok(controls_through(initial, &positions, scene.dt))
}

/// Reoptimizes the ego trajectory of `scene` from its first state, with
/// ground-truth agents and futures as cost inputs. The prediction term can
/// be switched off, which is how detections are evaluated.
pub fn reoptimize(scene: &Scene, model: &CostModel, include_prediction_term: bool) -> Result<ReoptResult> {
    if model.feature_set() != FeatureSet::Drive6 {
        return Err(Error::InvalidInput("plan reoptimization needs the driving cost".into()));
    }
    if scene.lanes.is_empty() {
        return Err(Error::NoLanes);
    }
    if scene.ego.speeds().is_none() {
        return Err(Error::InvalidInput("plan reoptimization needs logged ego speeds".into()));
    }
    let model = if include_prediction_term {
        model.clone()
    } else {
        model.without_feature(FeatureSet::Drive6.prediction_feature())
    };
    let problem = episode_problem(scene, &model)?;
    let initial = *problem.initial();
    let steps = problem.steps();

    let stage1 = stage_one_controls(scene, &model, &initial, steps)?;
    let stage1_objective = problem.cost(&stage1)?;

    let (controls, stage2_objective, converged, stage2_error) = match solve_controls(&problem, &stage1, MAX_REFINE_ITERS) {
        Ok((u, v, conv)) if v <= stage1_objective => (u, v, conv, None),
        Ok((_, v, _)) => (stage1.clone(), stage1_objective, false, Some(format!("refinement ended higher ({v})"))),
        Err(e) if e.is_numerical() || matches!(e, Error::NonFinite(_)) => {
            (stage1.clone(), stage1_objective, false, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let states = problem.rollout(&controls)?;
    debug_assert_eq!(model.dynamics, Dynamics::ExtendedUnicycle);
    let trajectory = Trajectory::from_states(scene.dt, &states, true)?;
    let (max_x, max_y) = reopt_error(&trajectory, &scene.ego)?;
    Ok(ReoptResult {
        trajectory,
        controls,
        stage1_objective,
        stage2_objective,
        converged,
        stage2_error,
        max_x,
        max_y,
    })
}
