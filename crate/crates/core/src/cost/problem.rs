//! Trajectory cost over a control sequence and its exact derivatives.

use nalgebra::{DMatrix, DVector};

use super::expansion::{expand_step, step_features, AgentFrame, FeatureContext, Need, PointExpr, PointRef, StepSpec, Tables, Var};
use super::{CostModel, FeatureVector};
use crate::dynamics::{jacobians, rollout, stack_controls, step_hessians, Control, EgoState};
use crate::error::{Error, Result};
use crate::lane::Lane;
use crate::prediction::AgentPrediction;
use crate::trajectory::Point;

/// What the planner knows about one agent at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub current: Option<Point>,
    pub prediction: Option<AgentPrediction>,
}

/// Agent inputs for one planning step, in a fixed agent order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub agents: Vec<AgentObservation>,
}

/// Value, gradient and Hessian of one scalar with respect to the stacked
/// controls `[u0_lon, u0_yaw, u1_lon, ...]`.
#[derive(Debug, Clone)]
pub struct ControlDerivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Planning cost of a control sequence from a fixed initial state. Step `j`
/// (1-based) pairs the state reached after control `j - 1` with that control
/// and with `frames[j - 1]`.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    model: CostModel,
    initial: EgoState,
    dt: f64,
    lanes: Vec<Lane>,
    goal: Point,
    agent_points: Vec<Point>,
    steps: Vec<StepSpec>,
}

impl ControlProblem {
    pub fn new(model: CostModel, initial: EgoState, frames: Vec<Frame>, lanes: Vec<Lane>, goal: Point, dt: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("planning problem needs at least one step".into()));
        }
        initial.validate()?;
        if model.feature_set() == super::FeatureSet::Drive6 && lanes.is_empty() {
            return Err(Error::NoLanes);
        }
        let mut agent_points = Vec::new();
        let slot = |p: Point, pts: &mut Vec<Point>| {
            pts.push(p);
            PointExpr::of(PointRef::Agent(pts.len() - 1))
        };
        let steps = frames
            .iter()
            .enumerate()
            .map(|(j, frame)| StepSpec {
                ego: j + 1,
                control: None,
                agents: frame
                    .agents
                    .iter()
                    .map(|obs| AgentFrame {
                        current: obs.current.map(|p| slot(p, &mut agent_points)),
                        modes: obs.prediction.as_ref().map_or_else(Vec::new, |pred| {
                            pred.modes()
                                .iter()
                                .map(|m| m.iter().map(|&p| slot(p, &mut agent_points)).collect())
                                .collect()
                        }),
                        probs: obs.prediction.as_ref().map_or_else(Vec::new, |p| p.probs().to_vec()),
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            model,
            initial,
            dt,
            lanes,
            goal,
            agent_points,
            steps,
        })
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn set_model(&mut self, model: CostModel) -> Result<()> {
        if model.feature_set() != self.model.feature_set() {
            return Err(Error::InvalidInput("cannot change the feature set of a problem".into()));
        }
        self.model = model;
        Ok(())
    }

    pub fn initial(&self) -> &EgoState {
        &self.initial
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn check(&self, controls: &[Control]) -> Result<()> {
        if controls.len() != self.steps.len() {
            return Err(Error::DimensionMismatch {
                what: "controls",
                expected: self.steps.len(),
                got: controls.len(),
            });
        }
        Ok(())
    }

    pub fn rollout(&self, controls: &[Control]) -> Result<Vec<EgoState>> {
        self.check(controls)?;
        rollout(self.model.dynamics, &self.initial, controls, self.dt)
    }

    fn context(&self) -> FeatureContext<'_> {
        FeatureContext {
            feature_set: self.model.feature_set(),
            sigma: self.model.rbf.sigma(),
            lanes: &self.lanes,
            goal: self.goal,
        }
    }

    fn with_controls(&self, controls: &[Control]) -> Vec<StepSpec> {
        self.steps
            .iter()
            .zip(controls)
            .enumerate()
            .map(|(j, (s, u))| StepSpec {
                control: Some((j, [u.longitudinal, u.yaw_rate])),
                ..s.clone()
            })
            .collect()
    }

    /// Feature vector at every step.
    pub fn features(&self, controls: &[Control]) -> Result<Vec<FeatureVector>> {
        let states = self.rollout(controls)?;
        let (pos, head) = split(&states);
        let tables = Tables {
            ego_positions: &pos,
            ego_headings: &head,
            agent_points: &self.agent_points,
        };
        let ctx = self.context();
        self.with_controls(controls)
            .iter()
            .map(|s| {
                Ok(FeatureVector {
                    feature_set: ctx.feature_set,
                    values: step_features(&ctx, &tables, s)?,
                })
            })
            .collect()
    }

    /// Sum of per-step costs.
    pub fn cost(&self, controls: &[Control]) -> Result<f64> {
        let theta = self.model.theta.weights();
        Ok(self
            .features(controls)?
            .iter()
            .map(|phi| phi.values.iter().zip(theta).map(|(f, w)| f * w).sum::<f64>())
            .sum())
    }

    /// Derivatives of each feature's trajectory sum; independent of theta.
    pub fn feature_derivatives(&self, controls: &[Control]) -> Result<Vec<ControlDerivatives>> {
        let states = self.rollout(controls)?;
        let n_feat = self.model.feature_set().len();
        let dynamics = self.model.dynamics;
        let ns = dynamics.state_dim();
        let nsteps = self.steps.len();
        let nx = nsteps * ns;
        let nu = nsteps * 2;
        let nz = nx + nu;

        let (pos, head) = split(&states);
        let tables = Tables {
            ego_positions: &pos,
            ego_headings: &head,
            agent_points: &self.agent_points,
        };
        let ctx = self.context();

        let index = |v: Var| -> Option<usize> {
            match v {
                Var::EgoX(i) if i > 0 => Some((i - 1) * ns),
                Var::EgoY(i) if i > 0 => Some((i - 1) * ns + 1),
                Var::Heading(i) if i > 0 => Some((i - 1) * ns + 2),
                Var::Ctrl(j, c) => Some(nx + 2 * j + c),
                _ => None,
            }
        };

        let mut values = vec![0.0; n_feat];
        let mut gz: Vec<DVector<f64>> = vec![DVector::zeros(nz); n_feat];
        let mut hz: Vec<DMatrix<f64>> = vec![DMatrix::zeros(nz, nz); n_feat];
        for step in self.with_controls(controls) {
            for (f, term) in expand_step(&ctx, &tables, &step, Need::Hessian)? {
                values[f] += term.value;
                let idx: Vec<Option<usize>> = term.vars.iter().map(|&v| index(v)).collect();
                let n = idx.len();
                for (a, ia) in idx.iter().enumerate() {
                    let Some(ia) = *ia else { continue };
                    gz[f][ia] += term.grad[a];
                    for (b, ib) in idx.iter().enumerate() {
                        if let Some(ib) = *ib {
                            hz[f][(ia, ib)] += term.hess[a * n + b];
                        }
                    }
                }
            }
        }

        // state sensitivities dx_j/dU for j = 1..N, plus step Jacobians
        let mut jac_a = Vec::with_capacity(nsteps);
        let mut jz = DMatrix::zeros(nz, nu);
        for j in 0..nu {
            jz[(nx + j, j)] = 1.0;
        }
        let mut prev = DMatrix::<f64>::zeros(ns, nu);
        for (j, u) in controls.iter().enumerate() {
            let (a, b) = jacobians(dynamics, &states[j], u, self.dt);
            let mut next = &a * &prev;
            for r in 0..ns {
                next[(r, 2 * j)] += b[(r, 0)];
                next[(r, 2 * j + 1)] += b[(r, 1)];
            }
            jz.view_mut((j * ns, 0), (ns, nu)).copy_from(&next);
            jac_a.push(a);
            prev = next;
        }
        let second: Vec<Vec<DMatrix<f64>>> = controls
            .iter()
            .enumerate()
            .map(|(j, u)| step_hessians(dynamics, &states[j], u, self.dt))
            .collect();

        let mut out = Vec::with_capacity(n_feat);
        for f in 0..n_feat {
            let gradient = jz.transpose() * &gz[f];
            let mut hessian = jz.transpose() * &hz[f] * &jz;

            // adjoint: lambda_j = dC/dx_j including downstream effects
            let mut lambda = vec![DVector::<f64>::zeros(ns); nsteps + 1];
            for j in (1..=nsteps).rev() {
                let mut l = gz[f].rows((j - 1) * ns, ns).into_owned();
                if j < nsteps {
                    l += jac_a[j].transpose() * &lambda[j + 1];
                }
                lambda[j] = l;
            }
            for j in 0..nsteps {
                let mut weighted = DMatrix::<f64>::zeros(ns + 2, ns + 2);
                for (i, h) in second[j].iter().enumerate() {
                    let w = lambda[j + 1][i];
                    if w != 0.0 && h.iter().any(|&x| x != 0.0) {
                        weighted += h * w;
                    }
                }
                let mut zj = DMatrix::<f64>::zeros(ns + 2, nu);
                if j > 0 {
                    zj.view_mut((0, 0), (ns, nu)).copy_from(&jz.view(((j - 1) * ns, 0), (ns, nu)));
                }
                zj[(ns, 2 * j)] = 1.0;
                zj[(ns + 1, 2 * j + 1)] = 1.0;
                hessian += zj.transpose() * weighted * &zj;
            }
            let sym = (&hessian + hessian.transpose()) * 0.5;
            out.push(ControlDerivatives {
                value: values[f],
                gradient,
                hessian: sym,
            });
        }
        Ok(out)
    }

    /// Gradient and symmetrized Hessian of the weighted trajectory cost.
    pub fn grad_hess(&self, controls: &[Control]) -> Result<ControlDerivatives> {
        combine(&self.feature_derivatives(controls)?, self.model.theta.weights())
    }

    /// Stacked controls helper for optimizers.
    pub fn stack(controls: &[Control]) -> DVector<f64> {
        stack_controls(controls)
    }
}

/// `sum_i theta_i * d_i`.
pub fn combine(per_feature: &[ControlDerivatives], theta: &[f64]) -> Result<ControlDerivatives> {
    let first = per_feature.first().ok_or_else(|| Error::InvalidInput("no features".into()))?;
    let mut out = ControlDerivatives {
        value: 0.0,
        gradient: DVector::zeros(first.gradient.len()),
        hessian: DMatrix::zeros(first.hessian.nrows(), first.hessian.ncols()),
    };
    for (d, &w) in per_feature.iter().zip(theta) {
        out.value += w * d.value;
        out.gradient += &d.gradient * w;
        out.hessian += &d.hessian * w;
    }
    Ok(out)
}

fn split(states: &[EgoState]) -> (Vec<Point>, Vec<f64>) {
    (states.iter().map(EgoState::position).collect(), states.iter().map(|s| s.heading).collect())
}

/// Frames for steps `start + 1 ..= start + steps` of a scene: every agent's
/// logged position and its logged future over `horizon` steps as a single
/// certain mode. Tracks are extrapolated at constant velocity past their end.
pub fn scene_frames(scene: &crate::scene::Scene, start: usize, steps: usize, horizon: usize) -> Result<Vec<Frame>> {
    (start + 1..=start + steps)
        .map(|tau| {
            let agents = scene
                .agents
                .values()
                .map(|traj| {
                    let future = (tau + 1..=tau + horizon).map(|i| traj.position_at(i)).collect();
                    Ok(AgentObservation {
                        current: Some(traj.position_at(tau)),
                        prediction: Some(AgentPrediction::single(future)?),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Frame { agents })
        })
        .collect()
}
