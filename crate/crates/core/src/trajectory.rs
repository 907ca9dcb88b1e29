use nalgebra::Vector2;

use crate::dynamics::{wrap_angle, EgoState};
use crate::error::{ensure_finite, Error, Result};

pub type Point = Vector2<f64>;

/// Uniformly sampled planar trajectory, optionally carrying headings and
/// speeds (the ego trajectory always does).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dt: f64,
    points: Vec<Point>,
    headings: Option<Vec<f64>>,
    speeds: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(dt: f64, points: Vec<Point>) -> Result<Self> {
        Self::with_states(dt, points, None, None)
    }

    pub fn with_states(
        dt: f64,
        points: Vec<Point>,
        headings: Option<Vec<f64>>,
        speeds: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidInput(format!("timestep must be positive, got {dt}")));
        }
        if points.is_empty() {
            return Err(Error::InvalidInput("trajectory must have at least one state".into()));
        }
        for p in &points {
            ensure_finite(p.x, "trajectory x")?;
            ensure_finite(p.y, "trajectory y")?;
        }
        for (what, series) in [("headings", &headings), ("speeds", &speeds)] {
            if let Some(s) = series {
                if s.len() != points.len() {
                    return Err(Error::DimensionMismatch {
                        what,
                        expected: points.len(),
                        got: s.len(),
                    });
                }
                for &v in s {
                    ensure_finite(v, "trajectory state")?;
                }
            }
        }
        Ok(Self {
            dt,
            points,
            headings: headings.map(|h| h.into_iter().map(wrap_angle).collect()),
            speeds,
        })
    }

    pub fn from_states(dt: f64, states: &[EgoState], with_speeds: bool) -> Result<Self> {
        Self::with_states(
            dt,
            states.iter().map(EgoState::position).collect(),
            Some(states.iter().map(|s| s.heading).collect()),
            with_speeds.then(|| states.iter().map(|s| s.speed).collect()),
        )
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn headings(&self) -> Option<&[f64]> {
        self.headings.as_deref()
    }

    pub fn speeds(&self) -> Option<&[f64]> {
        self.speeds.as_deref()
    }

    pub fn last(&self) -> Point {
        *self.points.last().unwrap()
    }

    /// Ego state at index `i`; needs headings. Missing speeds read as 0.
    pub fn state(&self, i: usize) -> Result<EgoState> {
        let headings = self
            .headings
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("trajectory has no headings".into()))?;
        let p = self.points[i];
        let speed = self.speeds.as_ref().map_or(0.0, |s| s[i]);
        Ok(EgoState::new(p.x, p.y, headings[i], speed))
    }

    /// Last per-step displacement, zero for single-state trajectories.
    pub fn last_step_velocity(&self) -> Point {
        match self.points.len() {
            0 | 1 => Point::zeros(),
            n => self.points[n - 1] - self.points[n - 2],
        }
    }

    /// Position at any step index; indices past the end are extrapolated at
    /// the last per-step displacement.
    pub fn position_at(&self, i: usize) -> Point {
        let n = self.points.len();
        if i < n {
            self.points[i]
        } else {
            self.last() + self.last_step_velocity() * (i - (n - 1)) as f64
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Trajectory> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!("bad slice {start}..{end} of {}", self.len())));
        }
        Trajectory::with_states(
            self.dt,
            self.points[start..end].to_vec(),
            self.headings.as_ref().map(|h| h[start..end].to_vec()),
            self.speeds.as_ref().map(|s| s[start..end].to_vec()),
        )
    }
}

/// Extrapolates the last position by the last per-step displacement.
/// Returns the `steps` future positions.
pub fn constant_velocity_predict(traj: &Trajectory, steps: usize) -> Result<Trajectory> {
    if traj.len() < 2 {
        return Err(Error::InvalidInput(
            "constant-velocity prediction needs two states or an explicit velocity".into(),
        ));
    }
    constant_velocity_from(traj.last(), traj.last_step_velocity(), steps, traj.dt())
}

/// Same, with an explicit per-step displacement.
pub fn constant_velocity_from(start: Point, step_displacement: Point, steps: usize, dt: f64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidInput("prediction needs at least one step".into()));
    }
    Trajectory::new(
        dt,
        (1..=steps).map(|k| start + step_displacement * k as f64).collect(),
    )
}
