//! Per-step feature values with local gradients and Hessians.
//!
//! Every feature term is a function of a few scalar variables (ego
//! coordinates at some step, a control, agent point coordinates). Points are
//! affine combinations of table entries so that constant-velocity
//! extrapolations and mode averages differentiate for free.

use nalgebra::{Matrix2, Vector2};

use super::FeatureSet;
use crate::dynamics::wrap_angle;
use crate::error::Result;
use crate::lane::{project_to_lane, Lane};
use crate::trajectory::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Var {
    EgoX(usize),
    EgoY(usize),
    Heading(usize),
    Ctrl(usize, usize),
    AgentX(usize),
    AgentY(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PointRef {
    Ego(usize),
    Agent(usize),
}

impl PointRef {
    fn vars(self) -> (Var, Var) {
        match self {
            PointRef::Ego(i) => (Var::EgoX(i), Var::EgoY(i)),
            PointRef::Agent(s) => (Var::AgentX(s), Var::AgentY(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PointExpr {
    pub terms: Vec<(PointRef, f64)>,
    pub offset: Point,
}

impl PointExpr {
    pub fn constant(p: Point) -> Self {
        Self { terms: Vec::new(), offset: p }
    }

    pub fn of(r: PointRef) -> Self {
        Self {
            terms: vec![(r, 1.0)],
            offset: Point::zeros(),
        }
    }

    pub fn combination(terms: Vec<(PointRef, f64)>) -> Self {
        Self { terms, offset: Point::zeros() }
    }

    pub fn plus_offset(mut self, offset: Point) -> Self {
        self.offset += offset;
        self
    }

    fn minus(&self, other: &PointExpr) -> PointExpr {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().map(|&(r, c)| (r, -c)));
        PointExpr {
            terms,
            offset: self.offset - other.offset,
        }
    }

    pub fn eval(&self, tables: &Tables) -> Point {
        self.terms.iter().fold(self.offset, |acc, &(r, c)| {
            acc + c * match r {
                PointRef::Ego(i) => tables.ego_positions[i],
                PointRef::Agent(s) => tables.agent_points[s],
            }
        })
    }
}

pub(crate) struct Tables<'a> {
    pub ego_positions: &'a [Point],
    pub ego_headings: &'a [f64],
    pub agent_points: &'a [Point],
}

#[derive(Debug, Clone)]
pub(crate) struct AgentFrame {
    pub current: Option<PointExpr>,
    /// `modes[k][i]` is the waypoint `i + 1` steps after this frame.
    pub modes: Vec<Vec<PointExpr>>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct StepSpec {
    /// Index into the ego tables; always >= 1 so the previous entry exists.
    pub ego: usize,
    pub control: Option<(usize, [f64; 2])>,
    pub agents: Vec<AgentFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Need {
    Value,
    Gradient,
    Hessian,
}

/// Scalar term with derivatives over its local variables; `hess` is
/// row-major and only filled when a Hessian was requested.
#[derive(Debug, Clone)]
pub(crate) struct Term {
    pub vars: Vec<Var>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Term {
    fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        self.grad.iter_mut().for_each(|g| *g *= s);
        self.hess.iter_mut().for_each(|h| *h *= s);
        self
    }
}

pub(crate) struct FeatureContext<'a> {
    pub feature_set: FeatureSet,
    pub sigma: f64,
    pub lanes: &'a [Lane],
    pub goal: Point,
}

/// Builds a term from functions of point differences `deltas[m]`, given the
/// outer gradient per delta and the outer Hessian block per delta pair.
fn delta_term(
    deltas: &[PointExpr],
    value: f64,
    grads: &[Vector2<f64>],
    hess_block: impl Fn(usize, usize) -> Matrix2<f64>,
    need: Need,
) -> Term {
    let mut vars: Vec<Var> = Vec::new();
    let local = |v: Var, vars: &mut Vec<Var>| match vars.iter().position(|w| *w == v) {
        Some(i) => i,
        None => {
            vars.push(v);
            vars.len() - 1
        }
    };
    // (local x index, local y index, coefficient) per delta
    let maps: Vec<Vec<(usize, usize, f64)>> = deltas
        .iter()
        .map(|d| {
            d.terms
                .iter()
                .map(|&(r, c)| {
                    let (vx, vy) = r.vars();
                    (local(vx, &mut vars), local(vy, &mut vars), c)
                })
                .collect()
        })
        .collect();
    let n = vars.len();
    let mut grad = vec![0.0; n];
    let mut hess = Vec::new();
    if need >= Need::Gradient {
        for (map, g) in maps.iter().zip(grads) {
            for &(ix, iy, c) in map {
                grad[ix] += c * g.x;
                grad[iy] += c * g.y;
            }
        }
    }
    if need >= Need::Hessian {
        hess = vec![0.0; n * n];
        for (m, map_m) in maps.iter().enumerate() {
            for (k, map_k) in maps.iter().enumerate() {
                let h = hess_block(m, k);
                if h == Matrix2::zeros() {
                    continue;
                }
                for &(ax, ay, ca) in map_m {
                    for &(bx, by, cb) in map_k {
                        let c = ca * cb;
                        hess[ax * n + bx] += c * h[(0, 0)];
                        hess[ax * n + by] += c * h[(0, 1)];
                        hess[ay * n + bx] += c * h[(1, 0)];
                        hess[ay * n + by] += c * h[(1, 1)];
                    }
                }
            }
        }
    }
    Term { vars, value, grad, hess }
}

fn sq_norm_term(delta: PointExpr, tables: &Tables, need: Need) -> Term {
    let d = delta.eval(tables);
    delta_term(&[delta], d.norm_squared(), &[2.0 * d], |_, _| 2.0 * Matrix2::identity(), need)
}

/// `exp(-|delta|^2 / 2 sigma^2)`, smooth everywhere.
fn rbf_term(delta: PointExpr, sigma: f64, tables: &Tables, need: Need) -> Term {
    let d = delta.eval(tables);
    let s2 = sigma * sigma;
    let f = (-d.norm_squared() / (2.0 * s2)).exp();
    let g = -f / s2 * d;
    let h = f * (d * d.transpose() / (s2 * s2) - Matrix2::identity() / s2);
    delta_term(&[delta], f, &[g], |_, _| h, need)
}

/// `rbf(sum_m w_m |delta_m|)`; distances below 1e-12 contribute a zero
/// subgradient.
fn rbf_of_distances_term(deltas: Vec<PointExpr>, weights: &[f64], sigma: f64, tables: &Tables, need: Need) -> Term {
    let diffs: Vec<Point> = deltas.iter().map(|d| d.eval(tables)).collect();
    let dists: Vec<f64> = diffs.iter().map(|d| d.norm()).collect();
    let total: f64 = weights.iter().zip(&dists).map(|(w, d)| w * d).sum();
    let s2 = sigma * sigma;
    let f = (-total * total / (2.0 * s2)).exp();
    let f1 = -total / s2 * f;
    let f2 = (total * total / (s2 * s2) - 1.0 / s2) * f;
    let units: Vec<Point> = diffs
        .iter()
        .zip(&dists)
        .map(|(d, &n)| if n > 1e-12 { d / n } else { Point::zeros() })
        .collect();
    let grads: Vec<Point> = units.iter().zip(weights).map(|(u, w)| f1 * w * u).collect();
    let hess = |m: usize, k: usize| {
        let mut h = f2 * weights[m] * weights[k] * units[m] * units[k].transpose();
        if m == k && dists[m] > 1e-12 {
            h += f1 * weights[m] * (Matrix2::identity() - units[m] * units[m].transpose()) / dists[m];
        }
        h
    };
    delta_term(&deltas, f, &grads, hess, need)
}

fn control_term(index: usize, u: [f64; 2], need: Need) -> Term {
    let vars = vec![Var::Ctrl(index, 0), Var::Ctrl(index, 1)];
    let grad = if need >= Need::Gradient { vec![2.0 * u[0], 2.0 * u[1]] } else { vec![0.0; 2] };
    let hess = if need >= Need::Hessian { vec![2.0, 0.0, 0.0, 2.0] } else { Vec::new() };
    Term {
        vars,
        value: u[0] * u[0] + u[1] * u[1],
        grad,
        hess,
    }
}

/// Lane offset and lane heading terms at ego entry `e`.
fn lane_terms(ctx: &FeatureContext, tables: &Tables, e: usize, need: Need) -> Result<(Term, Term)> {
    let p = tables.ego_positions[e];
    let (proj, lane_idx) = project_to_lane(&p, ctx.lanes)?;
    let lane = &ctx.lanes[lane_idx];
    let a = lane.centerline()[proj.segment];
    let b = lane.centerline()[proj.segment + 1];
    let seg = b - a;
    let diff = p - proj.point;

    let offset_hess = if proj.clamped {
        2.0 * Matrix2::identity()
    } else {
        let n = Point::new(-seg.y, seg.x) / seg.norm();
        2.0 * n * n.transpose()
    };
    let vars = vec![Var::EgoX(e), Var::EgoY(e), Var::Heading(e)];
    let mut offset = Term {
        vars: vars.clone(),
        value: diff.norm_squared(),
        grad: vec![2.0 * diff.x, 2.0 * diff.y, 0.0],
        hess: Vec::new(),
    };
    if need >= Need::Hessian {
        offset.hess = vec![
            offset_hess[(0, 0)], offset_hess[(0, 1)], 0.0,
            offset_hess[(1, 0)], offset_hess[(1, 1)], 0.0,
            0.0, 0.0, 0.0,
        ];
    }

    let err = wrap_angle(tables.ego_headings[e] - proj.heading);
    let dpsi = lane.heading_delta(proj.segment);
    let dlambda = if proj.clamped { Point::zeros() } else { seg / seg.norm_squared() };
    let gp = -2.0 * err * dpsi * dlambda;
    let mut heading = Term {
        vars,
        value: err * err,
        grad: vec![gp.x, gp.y, 2.0 * err],
        hess: Vec::new(),
    };
    if need >= Need::Hessian {
        let hpp = 2.0 * dpsi * dpsi * dlambda * dlambda.transpose();
        let hpsi = -2.0 * dpsi * dlambda;
        heading.hess = vec![
            hpp[(0, 0)], hpp[(0, 1)], hpsi.x,
            hpp[(1, 0)], hpp[(1, 1)], hpsi.y,
            hpsi.x, hpsi.y, 2.0,
        ];
    }
    Ok((offset, heading))
}

/// Ego position `i + 1` steps after entry `e`, extrapolated at constant
/// velocity past the end of the table.
fn ego_future(len: usize, e: usize, i: usize) -> PointExpr {
    let idx = e + 1 + i;
    let last = len - 1;
    if idx <= last {
        PointExpr::of(PointRef::Ego(idx))
    } else {
        let m = (idx - last) as f64;
        PointExpr::combination(vec![(PointRef::Ego(last), 1.0 + m), (PointRef::Ego(last - 1), -m)])
    }
}

/// Feature terms of one step, tagged with the feature index. Features with
/// no contributing term are zero.
pub(crate) fn expand_step(ctx: &FeatureContext, tables: &Tables, step: &StepSpec, need: Need) -> Result<Vec<(usize, Term)>> {
    let e = step.ego;
    let ego = PointExpr::of(PointRef::Ego(e));
    let goal = PointExpr::constant(ctx.goal);
    let mut out = Vec::new();
    match ctx.feature_set {
        FeatureSet::Toy4 => {
            out.push((0, sq_norm_term(ego.minus(&goal), tables, need)));
            if let Some((j, u)) = step.control {
                out.push((1, control_term(j, u, need)));
            }
            let ego_next = PointExpr::combination(vec![(PointRef::Ego(e), 2.0), (PointRef::Ego(e - 1), -1.0)]);
            for agent in &step.agents {
                if let Some(cur) = &agent.current {
                    out.push((2, rbf_term(ego.minus(cur), ctx.sigma, tables, need)));
                }
                for (mode, &p) in agent.modes.iter().zip(&agent.probs) {
                    if let Some(first) = mode.first() {
                        out.push((3, rbf_term(ego_next.minus(first), ctx.sigma, tables, need).scaled(p)));
                    }
                }
            }
        }
        FeatureSet::Drive6 => {
            let (offset, heading) = lane_terms(ctx, tables, e, need)?;
            out.push((0, offset));
            out.push((1, heading));
            out.push((2, sq_norm_term(ego.minus(&goal), tables, need)));
            if let Some((j, u)) = step.control {
                out.push((4, control_term(j, u, need)));
            }

            let ego_pos = tables.ego_positions[e];
            let mut nearest: Option<(f64, &PointExpr)> = None;
            for cur in step.agents.iter().filter_map(|a| a.current.as_ref()) {
                let d = (ego_pos - cur.eval(tables)).norm();
                if nearest.is_none_or(|(best, _)| d < best) {
                    nearest = Some((d, cur));
                }
            }
            if let Some((_, cur)) = nearest {
                out.push((3, rbf_term(ego.minus(cur), ctx.sigma, tables, need)));
            }

            // expected closest approach: per agent, per mode, earliest argmin
            // over waypoints; then the agent with the smallest expectation
            let len = tables.ego_positions.len();
            let mut best: Option<(f64, Vec<PointExpr>, &[f64])> = None;
            for agent in &step.agents {
                if agent.modes.is_empty() {
                    continue;
                }
                let mut expected = 0.0;
                let mut deltas = Vec::with_capacity(agent.modes.len());
                for (mode, &p) in agent.modes.iter().zip(&agent.probs) {
                    let mut pick: Option<(f64, PointExpr)> = None;
                    for (i, w) in mode.iter().enumerate() {
                        let delta = ego_future(len, e, i).minus(w);
                        let d = delta.eval(tables).norm();
                        if pick.as_ref().is_none_or(|(best, _)| d < *best) {
                            pick = Some((d, delta));
                        }
                    }
                    let (d, delta) = pick.expect("modes are non-empty");
                    expected += p * d;
                    deltas.push(delta);
                }
                if best.as_ref().is_none_or(|(b, _, _)| expected < *b) {
                    best = Some((expected, deltas, &agent.probs));
                }
            }
            if let Some((_, mut deltas, probs)) = best {
                let term = if deltas.len() == 1 {
                    rbf_term(deltas.pop().unwrap(), ctx.sigma, tables, need)
                } else {
                    rbf_of_distances_term(deltas, probs, ctx.sigma, tables, need)
                };
                out.push((5, term));
            }
        }
    }
    Ok(out)
}

/// Feature values of one step.
pub(crate) fn step_features(ctx: &FeatureContext, tables: &Tables, step: &StepSpec) -> Result<Vec<f64>> {
    let mut phi = vec![0.0; ctx.feature_set.len()];
    for (i, t) in expand_step(ctx, tables, step, Need::Value)? {
        phi[i] += t.value;
    }
    Ok(phi)
}
