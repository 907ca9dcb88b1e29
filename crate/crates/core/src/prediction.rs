use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::scene::AgentId;
use crate::trajectory::{Point, Trajectory};

const PROB_TOL: f64 = 1e-9;

/// K weighted trajectory modes for one agent, each with exactly `horizon`
/// future waypoints (steps `t+1 ..= t+horizon`).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPrediction {
    modes: Vec<Vec<Point>>,
    probs: Vec<f64>,
}

impl AgentPrediction {
    pub fn new(modes: Vec<Vec<Point>>, probs: Vec<f64>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidInput("prediction needs at least one mode".into()));
        }
        if probs.len() != modes.len() {
            return Err(Error::DimensionMismatch {
                what: "mode probabilities",
                expected: modes.len(),
                got: probs.len(),
            });
        }
        let len = modes[0].len();
        if len == 0 || modes.iter().any(|m| m.len() != len) {
            return Err(Error::InvalidInput("all modes need the same nonzero length".into()));
        }
        for p in modes.iter().flatten() {
            ensure_finite(p.x, "prediction waypoint")?;
            ensure_finite(p.y, "prediction waypoint")?;
        }
        if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::InvalidInput("mode probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidInput(format!("mode probabilities sum to {total}, not 1")));
        }
        Ok(Self { modes, probs })
    }

    pub fn single(mode: Vec<Point>) -> Result<Self> {
        Self::new(vec![mode], vec![1.0])
    }

    pub fn modes(&self) -> &[Vec<Point>] {
        &self.modes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn horizon(&self) -> usize {
        self.modes[0].len()
    }

    /// Index of the most probable mode; ties go to the first.
    pub fn most_likely(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    pub fn mode_trajectory(&self, k: usize, dt: f64) -> Result<Trajectory> {
        Trajectory::new(dt, self.modes[k].clone())
    }
}

/// Predictions made at step `frame` of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub frame: usize,
    pub horizon: usize,
    pub agents: BTreeMap<AgentId, AgentPrediction>,
}

impl PredictionSet {
    pub fn new(frame: usize, horizon: usize, agents: BTreeMap<AgentId, AgentPrediction>) -> Result<Self> {
        for (id, p) in &agents {
            if p.horizon() != horizon {
                return Err(Error::Schema(format!(
                    "agent {id}: modes have {} waypoints, expected {horizon}",
                    p.horizon()
                )));
            }
        }
        Ok(Self { frame, horizon, agents })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: PredictionSetRepr = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let agents = r
            .agents
            .into_iter()
            .map(|(id, a)| {
                let modes = a
                    .modes
                    .into_iter()
                    .map(|m| m.into_iter().map(|p| Point::new(p[0], p[1])).collect())
                    .collect();
                let pred = AgentPrediction::new(modes, a.probs).map_err(|e| Error::Schema(format!("agent {id}: {e}")))?;
                Ok((id, pred))
            })
            .collect::<Result<_>>()?;
        PredictionSet::new(r.frame, r.horizon, agents)
    }

    pub fn to_json(&self) -> Result<String> {
        let r = PredictionSetRepr {
            frame: self.frame,
            horizon: self.horizon,
            agents: self
                .agents
                .iter()
                .map(|(id, p)| {
                    (
                        id.clone(),
                        AgentPredictionRepr {
                            modes: p.modes.iter().map(|m| m.iter().map(|q| [q.x, q.y]).collect()).collect(),
                            probs: p.probs.clone(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionSetRepr {
    frame: usize,
    horizon: usize,
    agents: BTreeMap<AgentId, AgentPredictionRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentPredictionRepr {
    modes: Vec<Vec<[f64; 2]>>,
    probs: Vec<f64>,
}

/// Planar oriented box (five numbers) with a confidence score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub length: f64,
    pub heading: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentId>,
}

impl DetectionBox {
    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.x, self.y, self.width, self.length, self.heading, self.score] {
            ensure_finite(v, "detection box")?;
        }
        if self.width <= 0.0 || self.length <= 0.0 {
            return Err(Error::InvalidInput("box extents must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidInput(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSet {
    pub frame: usize,
    pub boxes: Vec<DetectionBox>,
}

impl DetectionSet {
    pub fn new(frame: usize, boxes: Vec<DetectionBox>) -> Result<Self> {
        for b in &boxes {
            b.validate()?;
        }
        Ok(Self { frame, boxes })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: DetectionSet = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        DetectionSet::new(raw.frame, raw.boxes)
    }
}
