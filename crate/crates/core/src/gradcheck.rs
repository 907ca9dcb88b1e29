//! Finite-difference checks of the analytic derivatives on random scenes.
//!
//! Derivatives are compared against a fourth-order central stencil. Errors
//! are norm-wise relative, with the denominator floored at [`SCALE_FLOOR`]
//! so that vanishing gradients are compared absolutely.
//!
//! The nearest-agent terms are not differentiable where two agents tie. A
//! stencil straddling such a point estimates nothing, so each check runs at
//! two step sizes and keeps the better agreement.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cioc::episode_problem;
use crate::cost::{default_sigma, CostModel, FeatureSet, RbfParams, SensitivityWindow, Theta};
use crate::dynamics::{linearize_dynamics, rollout, unicycle_step, unstack_controls, Control, Dynamics, EgoState};
use crate::error::Result;
use crate::lane::Lane;
use crate::prediction::{AgentPrediction, PredictionSet};
use crate::scene::{AgentId, Scene};
use crate::sim::{perturb_detections, PerturbationSpec};
use crate::trajectory::{Point, Trajectory};

pub const SCALE_FLOOR: f64 = 1e-3;
const STEPS: [f64; 2] = [1e-4, 1e-5];

fn best_of(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for h in STEPS {
        best = best.min(f(h)?);
    }
    Ok(best)
}

/// `‖a − b‖ / max(‖b‖, SCALE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(SCALE_FLOOR)
}

/// Five-point central difference of `f` at zero.
pub fn directional<T, F>(mut f: F, h: f64) -> Result<T>
where
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    F: FnMut(f64) -> Result<T>,
{
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok(((p1 - m1) * 8.0 + (m2 - p2)) * (1.0 / (12.0 * h)))
}

pub fn numeric_gradient(mut f: impl FnMut(&DVector<f64>) -> Result<f64>, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        g[i] = directional(
            |t| {
                let mut y = x.clone();
                y[i] += t;
                f(&y)
            },
            h,
        )?;
    }
    Ok(g)
}

/// Columns are central differences of the analytic gradient.
pub fn numeric_jacobian(mut f: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    let m = f(x)?.len();
    let mut jac = DMatrix::zeros(m, x.len());
    for i in 0..x.len() {
        let col = directional(
            |t| {
                let mut y = x.clone();
                y[i] += t;
                f(&y)
            },
            h,
        )?;
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// Worst relative errors over one random case.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckErrors {
    pub control_gradient: f64,
    pub control_hessian: f64,
    pub prediction_gradient: f64,
    pub detection_gradient: f64,
    pub dynamics_jacobian: f64,
}

impl CheckErrors {
    pub fn max(self, other: Self) -> Self {
        Self {
            control_gradient: self.control_gradient.max(other.control_gradient),
            control_hessian: self.control_hessian.max(other.control_hessian),
            prediction_gradient: self.prediction_gradient.max(other.prediction_gradient),
            detection_gradient: self.detection_gradient.max(other.detection_gradient),
            dynamics_jacobian: self.dynamics_jacobian.max(other.dynamics_jacobian),
        }
    }

    pub fn gradients(&self) -> f64 {
        self.control_gradient
            .max(self.prediction_gradient)
            .max(self.detection_gradient)
            .max(self.dynamics_jacobian)
    }
}

/// A random scene with agents near the ego path, and the model it is
/// checked under.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub scene: Scene,
    pub model: CostModel,
    pub controls: Vec<Control>,
    pub frame: usize,
}

fn point(rng: &mut ChaCha8Rng, r: f64) -> Point {
    Point::new(rng.random_range(-r..r), rng.random_range(-r..r))
}

pub fn random_case(seed: u64) -> Result<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_set = if rng.random_range(0..2) == 0 { FeatureSet::Toy4 } else { FeatureSet::Drive6 };
    let dynamics = feature_set.dynamics();
    let weights: Vec<f64> = (0..feature_set.len()).map(|_| rng.random_range(0.1..3.0)).collect();
    let horizon = rng.random_range(2..=4);
    let sigma = default_sigma(feature_set) * rng.random_range(0.5..1.5);
    let model = CostModel::new(Theta::new(feature_set, weights)?, RbfParams::new(sigma)?, horizon)?;

    let dt = 0.5;
    let steps = rng.random_range(3..=6);
    let len = steps + 2 * horizon + 2;
    let start = EgoState::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-PI..PI),
        if dynamics == Dynamics::Unicycle { 0.0 } else { rng.random_range(0.3..2.0) },
    );
    let controls: Vec<Control> = (0..len - 1)
        .map(|_| match dynamics {
            Dynamics::Unicycle => Control::new(rng.random_range(0.2..2.0), rng.random_range(-0.8..0.8)),
            Dynamics::ExtendedUnicycle => Control::new(rng.random_range(-0.5..0.5), rng.random_range(-0.6..0.6)),
        })
        .collect();
    let states = rollout(dynamics, &start, &controls, dt)?;
    let ego = Trajectory::from_states(dt, &states, dynamics == Dynamics::ExtendedUnicycle)?;

    let mut agents = BTreeMap::new();
    for a in 0..rng.random_range(1..=3) {
        let anchor = states[rng.random_range(0..len)].position() + point(&mut rng, 1.5 * sigma);
        let v = point(&mut rng, 1.0) * dt;
        let cross = rng.random_range(0..len) as f64;
        let pts = (0..len).map(|i| anchor + v * (i as f64 - cross)).collect();
        agents.insert(AgentId(format!("agent{a}")), Trajectory::new(dt, pts)?);
    }

    let lanes = match feature_set {
        FeatureSet::Toy4 => Vec::new(),
        FeatureSet::Drive6 => {
            let h0 = start.heading + rng.random_range(-0.5..0.5);
            let h1 = h0 + rng.random_range(-0.6..0.6);
            let offset = point(&mut rng, 1.0);
            let a = start.position() + offset - 20.0 * Point::new(h0.cos(), h0.sin());
            let b = start.position() + offset + 3.0 * Point::new(h0.cos(), h0.sin());
            let c = b + 20.0 * Point::new(h1.cos(), h1.sin());
            vec![Lane::new(vec![a, b, c], vec![h0, h0, h1])?]
        }
    };
    let goal = point(&mut rng, 6.0);
    let scene = Scene::new(dt, horizon, goal, ego.slice(0, steps + 1)?, agents, lanes)?;
    let frame = rng.random_range(0..=steps);
    let mut full = scene.clone();
    full.ego = ego;
    Ok(RandomCase {
        scene: full,
        model,
        controls: controls[..steps].to_vec(),
        frame,
    })
}

fn control_errors(case: &RandomCase) -> Result<(f64, f64)> {
    let mut episode = case.scene.clone();
    episode.ego = episode.ego.slice(0, case.controls.len() + 1)?;
    let problem = episode_problem(&episode, &case.model)?;
    let x = DVector::from_iterator(2 * case.controls.len(), case.controls.iter().flat_map(|u| [u.longitudinal, u.yaw_rate]));
    let d = problem.grad_hess(&case.controls)?;
    let g = best_of(|step| {
        let g = numeric_gradient(|y| problem.cost(&unstack_controls(y)), &x, step)?;
        Ok(relative_error(d.gradient.as_slice(), g.as_slice()))
    })?;
    let h = best_of(|step| {
        let h = numeric_jacobian(|y| Ok(problem.grad_hess(&unstack_controls(y))?.gradient), &x, step)?;
        Ok(relative_error(d.hessian.as_slice(), h.as_slice()))
    })?;
    Ok((g, h))
}

fn window_errors(window: &SensitivityWindow, detection: bool) -> Result<f64> {
    best_of(|step| window_error_at(window, detection, step))
}

fn window_error_at(window: &SensitivityWindow, detection: bool, step: f64) -> Result<f64> {
    let grads = window.gradient()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (a, g) in grads.iter().enumerate() {
        let targets: Vec<(Option<(usize, usize)>, Point)> = if detection {
            vec![(None, g.current)]
        } else {
            g.waypoints
                .iter()
                .enumerate()
                .flat_map(|(k, m)| m.iter().enumerate().map(move |(i, p)| (Some((k, i)), *p)))
                .collect()
        };
        for (target, grad) in targets {
            for (axis, unit) in [Point::x(), Point::y()].into_iter().enumerate() {
                let n = directional(|t| window.perturbed(a, target, unit * t).cost(), step)?;
                analytic.push(grad[axis]);
                numeric.push(n);
            }
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn random_predictions(case: &RandomCase, rng: &mut ChaCha8Rng) -> Result<PredictionSet> {
    let t = case.model.horizon;
    let mut agents = BTreeMap::new();
    for (id, traj) in &case.scene.agents {
        let k = rng.random_range(1..=3);
        let modes: Vec<Vec<Point>> = (0..k)
            .map(|_| (1..=t).map(|i| traj.position_at(case.frame + i) + point(rng, 0.8)).collect())
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        agents.insert(id.clone(), AgentPrediction::new(modes, raw.iter().map(|p| p / total).collect())?);
    }
    PredictionSet::new(case.frame, t, agents)
}

fn dynamics_error(case: &RandomCase) -> Result<f64> {
    let dynamics = case.model.dynamics;
    let dt = case.scene.dt;
    let mut worst = 0.0f64;
    for (i, u) in case.controls.iter().enumerate() {
        let s = case.scene.ego.state(i)?;
        let s = EgoState { speed: if dynamics == Dynamics::Unicycle { 0.0 } else { s.speed }, ..s };
        let (a, b) = linearize_dynamics(dynamics, &s, u, dt)?;
        let n = dynamics.state_dim();
        let x = DVector::from_iterator(n + 2, s.to_vector(dynamics).iter().copied().chain([u.longitudinal, u.yaw_rate]));
        let mut analytic = DMatrix::zeros(n, n + 2);
        analytic.view_mut((0, 0), (n, n)).copy_from(&a);
        analytic.view_mut((0, n), (n, 2)).copy_from(&b);
        let err = best_of(|step| {
            let jac = numeric_jacobian(
                |y| {
                    let state = EgoState::from_vector(&y.rows(0, n).into_owned(), dynamics, &s);
                    let next = unicycle_step(dynamics, &state, &Control::new(y[n], y[n + 1]), dt)?;
                    Ok(next.to_vector(dynamics))
                },
                &x,
                step,
            )?;
            Ok(relative_error(analytic.as_slice(), jac.as_slice()))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks every analytic derivative on the case drawn from `seed`.
pub fn check_case(seed: u64) -> Result<CheckErrors> {
    let case = random_case(seed)?;
    let (control_gradient, control_hessian) = control_errors(&case)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let predictions = random_predictions(&case, &mut rng)?;
    let window = SensitivityWindow::for_predictions(&case.model, &case.scene, &case.scene.ego, &predictions)?;
    let prediction_gradient = window_errors(&window, false)?;

    let detections = perturb_detections(&case.scene, case.frame, &PerturbationSpec { sigma: 0.5, seed })?;
    let window = SensitivityWindow::for_detections(&case.model, &case.scene, &case.scene.ego, &detections)?;
    let detection_gradient = window_errors(&window, true)?;

    Ok(CheckErrors {
        control_gradient,
        control_hessian,
        prediction_gradient,
        detection_gradient,
        dynamics_jacobian: dynamics_error(&case)?,
    })
}
