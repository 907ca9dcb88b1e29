//! Unicycle and dynamically-extended unicycle models, integrated with
//! forward Euler.
//!
//! State vectors are `[x, y, heading]` for [`Dynamics::Unicycle`] and
//! `[x, y, heading, speed]` for [`Dynamics::ExtendedUnicycle`]. Controls are
//! always two-dimensional: `(speed, yaw_rate)` and `(acceleration, yaw_rate)`
//! respectively. Position rows use the speed *before* the update.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    Unicycle,
    ExtendedUnicycle,
}

impl Dynamics {
    pub fn state_dim(self) -> usize {
        match self {
            Dynamics::Unicycle => 3,
            Dynamics::ExtendedUnicycle => 4,
        }
    }

    pub const CONTROL_DIM: usize = 2;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Only part of the state in extended mode; carried unchanged otherwise.
    pub speed: f64,
}

impl EgoState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed,
        }
    }

    pub fn position(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.x, self.y)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(self.x, "ego x")?;
        ensure_finite(self.y, "ego y")?;
        ensure_finite(self.heading, "ego heading")?;
        ensure_finite(self.speed, "ego speed")
    }

    pub fn to_vector(&self, dynamics: Dynamics) -> DVector<f64> {
        match dynamics {
            Dynamics::Unicycle => DVector::from_column_slice(&[self.x, self.y, self.heading]),
            Dynamics::ExtendedUnicycle => {
                DVector::from_column_slice(&[self.x, self.y, self.heading, self.speed])
            }
        }
    }

    /// Inverse of [`EgoState::to_vector`]; `template` supplies the speed in
    /// basic mode.
    pub fn from_vector(v: &DVector<f64>, dynamics: Dynamics, template: &EgoState) -> Self {
        match dynamics {
            Dynamics::Unicycle => EgoState::new(v[0], v[1], v[2], template.speed),
            Dynamics::ExtendedUnicycle => EgoState::new(v[0], v[1], v[2], v[3]),
        }
    }
}

/// `longitudinal` is a speed (m/s) for the basic unicycle and an
/// acceleration (m/s^2) for the extended one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub longitudinal: f64,
    pub yaw_rate: f64,
}

impl Control {
    pub fn new(longitudinal: f64, yaw_rate: f64) -> Self {
        Self {
            longitudinal,
            yaw_rate,
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.longitudinal * self.longitudinal + self.yaw_rate * self.yaw_rate
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(self.longitudinal, "control longitudinal")?;
        ensure_finite(self.yaw_rate, "control yaw rate")
    }
}

/// Flattens controls into `[u0_lon, u0_yaw, u1_lon, ...]`.
pub fn stack_controls(controls: &[Control]) -> DVector<f64> {
    DVector::from_iterator(
        controls.len() * 2,
        controls.iter().flat_map(|u| [u.longitudinal, u.yaw_rate]),
    )
}

pub fn unstack_controls(v: &DVector<f64>) -> Vec<Control> {
    v.as_slice()
        .chunks_exact(2)
        .map(|c| Control::new(c[0], c[1]))
        .collect()
}

fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("timestep must be positive, got {dt}")))
    }
}

pub fn unicycle_step(dynamics: Dynamics, state: &EgoState, u: &Control, dt: f64) -> Result<EgoState> {
    check_dt(dt)?;
    state.validate()?;
    u.validate()?;
    Ok(step_unchecked(dynamics, state, u, dt))
}

pub(crate) fn step_unchecked(dynamics: Dynamics, s: &EgoState, u: &Control, dt: f64) -> EgoState {
    let (sin, cos) = s.heading.sin_cos();
    match dynamics {
        Dynamics::Unicycle => EgoState::new(
            s.x + u.longitudinal * cos * dt,
            s.y + u.longitudinal * sin * dt,
            s.heading + u.yaw_rate * dt,
            s.speed,
        ),
        Dynamics::ExtendedUnicycle => EgoState::new(
            s.x + s.speed * cos * dt,
            s.y + s.speed * sin * dt,
            s.heading + u.yaw_rate * dt,
            s.speed + u.longitudinal * dt,
        ),
    }
}

/// Returns `controls.len() + 1` states starting with `s0`.
pub fn rollout(dynamics: Dynamics, s0: &EgoState, controls: &[Control], dt: f64) -> Result<Vec<EgoState>> {
    if controls.is_empty() {
        return Err(Error::InvalidInput("rollout needs at least one control".into()));
    }
    check_dt(dt)?;
    s0.validate()?;
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s0);
    for u in controls {
        u.validate()?;
        let next = step_unchecked(dynamics, states.last().unwrap(), u, dt);
        states.push(next);
    }
    Ok(states)
}

/// State and control Jacobians of one Euler step.
pub fn linearize_dynamics(
    dynamics: Dynamics,
    state: &EgoState,
    u: &Control,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dt(dt)?;
    state.validate()?;
    u.validate()?;
    Ok(jacobians(dynamics, state, u, dt))
}

pub(crate) fn jacobians(dynamics: Dynamics, s: &EgoState, u: &Control, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (sin, cos) = s.heading.sin_cos();
    let n = dynamics.state_dim();
    let mut a = DMatrix::identity(n, n);
    let mut b = DMatrix::zeros(n, 2);
    match dynamics {
        Dynamics::Unicycle => {
            let v = u.longitudinal;
            a[(0, 2)] = -v * sin * dt;
            a[(1, 2)] = v * cos * dt;
            b[(0, 0)] = cos * dt;
            b[(1, 0)] = sin * dt;
            b[(2, 1)] = dt;
        }
        Dynamics::ExtendedUnicycle => {
            let v = s.speed;
            a[(0, 2)] = -v * sin * dt;
            a[(1, 2)] = v * cos * dt;
            a[(0, 3)] = cos * dt;
            a[(1, 3)] = sin * dt;
            b[(2, 1)] = dt;
            b[(3, 0)] = dt;
        }
    }
    (a, b)
}

/// Hessians of each next-state component with respect to the joint vector
/// `[state, control]`. Only the position rows are nonlinear.
pub(crate) fn step_hessians(dynamics: Dynamics, s: &EgoState, u: &Control, dt: f64) -> Vec<DMatrix<f64>> {
    let (sin, cos) = s.heading.sin_cos();
    let n = dynamics.state_dim();
    let m = n + 2;
    let mut hx = DMatrix::zeros(m, m);
    let mut hy = DMatrix::zeros(m, m);
    // index of the speed variable inside the joint vector
    let (speed_idx, v) = match dynamics {
        Dynamics::Unicycle => (n, u.longitudinal),
        Dynamics::ExtendedUnicycle => (3, s.speed),
    };
    hx[(2, 2)] = -v * cos * dt;
    hx[(2, speed_idx)] = -sin * dt;
    hx[(speed_idx, 2)] = -sin * dt;
    hy[(2, 2)] = -v * sin * dt;
    hy[(2, speed_idx)] = cos * dt;
    hy[(speed_idx, 2)] = cos * dt;
    let mut out = vec![hx, hy];
    for _ in 2..n {
        out.push(DMatrix::zeros(m, m));
    }
    out
}
