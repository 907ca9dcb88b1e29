//! Cost-weight learning from locally optimal demonstrations.
//!
//! Around a demonstration the cost is expanded to second order in the
//! stacked controls, so the demonstrator's control distribution
//! `p(u) ∝ exp(-c(u))` becomes a Gaussian with precision `H` and the
//! demonstration sits `H⁻¹g` away from its mode.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::cost::{combine, scene_frames, ControlDerivatives, ControlProblem, CostModel, FeatureSet, Theta};
use crate::dynamics::{rollout, wrap_angle, Control, Dynamics, EgoState};
use crate::error::{Error, Result};
use crate::optim::{lbfgs, MinimizeOptions};
use crate::scene::Scene;

/// Ridge added to `H` when it is not numerically positive definite.
pub const HESSIAN_RIDGE: f64 = 1e-6;

/// Tolerance on the rollout of recovered controls, in meters.
pub const ROLLOUT_TOLERANCE: f64 = 1e-6;

/// Expert controls for a scene, with the per-feature cost derivatives at
/// those controls. The derivatives do not depend on the weights, so the fit
/// only recombines them.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub scene: Scene,
    pub controls: Vec<Control>,
    features: Vec<ControlDerivatives>,
}

impl Demonstration {
    pub fn feature_derivatives(&self) -> &[ControlDerivatives] {
        &self.features
    }

    pub fn control_dim(&self) -> usize {
        self.controls.len() * 2
    }
}

/// Controls that reproduce the logged ego states under the model's
/// dynamics.
pub fn invert_dynamics(scene: &Scene, dynamics: Dynamics) -> Result<Vec<Control>> {
    let ego = &scene.ego;
    if ego.len() < 2 {
        return Err(Error::InvalidInput("ego trajectory needs at least two states".into()));
    }
    if dynamics == Dynamics::ExtendedUnicycle && ego.speeds().is_none() {
        return Err(Error::InvalidInput("extended dynamics need logged ego speeds".into()));
    }
    let dt = scene.dt;
    let states: Vec<EgoState> = (0..ego.len()).map(|i| ego.state(i)).collect::<Result<_>>()?;
    let controls: Vec<Control> = states
        .windows(2)
        .map(|w| {
            let yaw_rate = wrap_angle(w[1].heading - w[0].heading) / dt;
            let longitudinal = match dynamics {
                Dynamics::Unicycle => {
                    let (s, c) = w[0].heading.sin_cos();
                    let d = w[1].position() - w[0].position();
                    (d.x * c + d.y * s) / dt
                }
                Dynamics::ExtendedUnicycle => (w[1].speed - w[0].speed) / dt,
            };
            Control::new(longitudinal, yaw_rate)
        })
        .collect();

    let replay = rollout(dynamics, &states[0], &controls, dt)?;
    for (i, (a, b)) in replay.iter().zip(&states).enumerate() {
        let err = (a.position() - b.position()).norm();
        if !(err <= ROLLOUT_TOLERANCE) {
            return Err(Error::InvalidInput(format!(
                "ego trajectory is inconsistent with {dynamics:?} dynamics at step {i} (rollout error {err:.3e} m)"
            )));
        }
    }
    Ok(controls)
}

/// Planning problem over a whole logged episode: from the first ego state,
/// with ground-truth agent positions and futures at every step.
pub fn episode_problem(scene: &Scene, model: &CostModel) -> Result<ControlProblem> {
    let steps = scene.ego.len().saturating_sub(1);
    if steps == 0 {
        return Err(Error::InvalidInput("ego trajectory needs at least two states".into()));
    }
    let frames = scene_frames(scene, 0, steps, model.horizon)?;
    ControlProblem::new(model.clone(), scene.ego_state(0)?, frames, scene.lanes.clone(), scene.goal, scene.dt)
}

/// Recovers the expert controls and precomputes the per-feature
/// derivatives. Only the structure of `model` (feature set, bandwidth,
/// horizon) is used.
pub fn assemble_demo(scene: &Scene, model: &CostModel) -> Result<Demonstration> {
    scene.validate()?;
    let controls = invert_dynamics(scene, model.dynamics)?;
    let problem = episode_problem(scene, model)?;
    let features = problem.feature_derivatives(&controls)?;
    Ok(Demonstration {
        scene: scene.clone(),
        controls,
        features,
    })
}

/// Laplace terms for one demonstration.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub nll: f64,
    /// Whether the ridge was needed to factor `H`.
    pub ridged: bool,
    chol: Cholesky<f64, Dyn>,
    /// `H⁻¹ g`
    step: DVector<f64>,
}

fn factor(hessian: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = hessian.clone().cholesky() {
        return Ok((c, false));
    }
    let n = hessian.nrows();
    let ridged = hessian + DMatrix::identity(n, n) * HESSIAN_RIDGE;
    match ridged.cholesky() {
        Some(c) => Ok((c, true)),
        None => {
            let min_pivot = hessian.clone().symmetric_eigenvalues().min();
            Err(Error::NotPositiveDefinite { min_pivot })
        }
    }
}

/// Negative log-likelihood of controls whose cost has gradient `g` and
/// Hessian `H` at the demonstration:
/// `½ gᵀH⁻¹g − ½ log|H| + (d/2) log 2π`.
pub fn laplace_terms(gradient: &DVector<f64>, hessian: &DMatrix<f64>) -> Result<LaplaceFit> {
    if gradient.len() != hessian.nrows() || !hessian.is_square() {
        return Err(Error::DimensionMismatch {
            what: "Laplace Hessian",
            expected: gradient.len(),
            got: hessian.nrows(),
        });
    }
    let (chol, ridged) = factor(hessian)?;
    let step = chol.solve(gradient);
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let d = gradient.len() as f64;
    let nll = 0.5 * gradient.dot(&step) - 0.5 * log_det + 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    if !nll.is_finite() {
        return Err(Error::NonFinite("Laplace likelihood"));
    }
    Ok(LaplaceFit { nll, ridged, chol, step })
}

pub fn laplace_nll_from(gradient: &DVector<f64>, hessian: &DMatrix<f64>) -> Result<f64> {
    Ok(laplace_terms(gradient, hessian)?.nll)
}

/// Laplace negative log-likelihood of a demonstration under `model`.
pub fn laplace_nll(model: &CostModel, demo: &Demonstration) -> Result<f64> {
    let d = combine(&demo.features, model.theta.weights())?;
    laplace_nll_from(&d.gradient, &d.hessian)
}

/// NLL and its gradient with respect to the weights.
fn nll_and_theta_gradient(demo: &Demonstration, theta: &[f64]) -> Result<(f64, DVector<f64>, bool)> {
    let d = combine(&demo.features, theta)?;
    let fit = laplace_terms(&d.gradient, &d.hessian)?;
    let n = d.gradient.len();
    let inverse = fit.chol.solve(&DMatrix::identity(n, n));
    let x = &fit.step;
    let grad = DVector::from_iterator(
        theta.len(),
        demo.features.iter().map(|f| {
            let trace = inverse.component_mul(&f.hessian).sum();
            f.gradient.dot(x) - 0.5 * x.dot(&(&f.hessian * x)) - 0.5 * trace
        }),
    );
    Ok((fit.nll, grad, fit.ridged))
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    /// Weight of `λ‖θ‖²`.
    pub lambda: f64,
    pub max_iters: usize,
    /// Starting weights; all ones when absent.
    pub initial: Option<Vec<f64>>,
    /// Recorded for provenance; the fit itself is deterministic.
    pub seed: u64,
    pub memory: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            max_iters: 200,
            initial: None,
            seed: 0,
            memory: 10,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub feature_set: FeatureSet,
    pub theta_hat: Vec<f64>,
    /// Objective at the solution, regularizer included.
    pub nll: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    /// Demonstrations whose Hessian needed the ridge at the solution.
    pub ridged_demos: usize,
    pub demos: usize,
    pub options: FitOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_cosine: Option<f64>,
}

impl FitReport {
    pub fn theta(&self) -> Result<Theta> {
        Theta::new(self.feature_set, self.theta_hat.clone())
    }
}

/// Objective in log-weights `η` (θ = exp η) and its gradient.
pub fn fit_objective(demos: &[Demonstration], eta: &DVector<f64>, lambda: f64) -> Result<(f64, DVector<f64>)> {
    let theta: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let mut value = lambda * theta.iter().map(|t| t * t).sum::<f64>();
    let mut grad_theta = DVector::from_iterator(theta.len(), theta.iter().map(|t| 2.0 * lambda * t));
    for demo in demos {
        let (nll, g, _) = nll_and_theta_gradient(demo, &theta)?;
        value += nll;
        grad_theta += g;
    }
    let grad_eta = grad_theta.component_mul(&DVector::from_vec(theta));
    Ok((value, grad_eta))
}

/// All-ones weights with the control-effort weight doubled until every
/// demonstration's Hessian is positive definite. Effort adds `2θ I`, so
/// this terminates unless the other terms are unbounded.
pub fn feasible_start(demos: &[Demonstration], feature_set: FeatureSet) -> Result<Vec<f64>> {
    let effort = match feature_set {
        FeatureSet::Toy4 => 1,
        FeatureSet::Drive6 => 4,
    };
    let mut theta = vec![1.0; feature_set.len()];
    for _ in 0..64 {
        let ok = demos.iter().all(|d| {
            combine(&d.features, &theta).is_ok_and(|c| c.hessian.clone().cholesky().is_some())
        });
        if ok {
            return Ok(theta);
        }
        theta[effort] *= 2.0;
    }
    Err(Error::NotPositiveDefinite { min_pivot: f64::NAN })
}

/// Maximum-likelihood weights over a set of demonstrations.
pub fn fit_theta(demos: &[Demonstration], feature_set: FeatureSet, options: &FitOptions) -> Result<FitReport> {
    if demos.is_empty() {
        return Err(Error::InvalidInput("no demonstrations to fit".into()));
    }
    let n = feature_set.len();
    for d in demos {
        if d.features.len() != n {
            return Err(Error::DimensionMismatch {
                what: "demonstration features",
                expected: n,
                got: d.features.len(),
            });
        }
    }
    let initial = match &options.initial {
        Some(w) => w.clone(),
        None => feasible_start(demos, feature_set)?,
    };
    if initial.len() != n || initial.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidInput("initial weights must be positive, one per feature".into()));
    }
    let eta0 = DVector::from_iterator(n, initial.iter().map(|t| t.ln()));
    let result = lbfgs(
        eta0,
        |eta| fit_objective(demos, eta, options.lambda),
        options.memory,
        MinimizeOptions {
            max_iters: options.max_iters,
            rel_tol: 1e-12,
            grad_tol: options.grad_tol,
        },
    )?;
    let theta_hat: Vec<f64> = result.x.iter().map(|e| e.exp()).collect();
    let mut ridged_demos = 0;
    for demo in demos {
        if nll_and_theta_gradient(demo, &theta_hat)?.2 {
            ridged_demos += 1;
        }
    }
    Ok(FitReport {
        feature_set,
        theta_hat,
        nll: result.value,
        iterations: result.iterations,
        converged: result.converged,
        trace: result.trace,
        ridged_demos,
        demos: demos.len(),
        options: options.clone(),
        planted_cosine: None,
    })
}
