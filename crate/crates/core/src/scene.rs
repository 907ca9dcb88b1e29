use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{EgoState};
use crate::error::{ensure_finite, Error, Result};
use crate::lane::Lane;
use crate::trajectory::{Point, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_owned())
    }
}

/// A logged or generated traffic scene. Every trajectory shares `dt` and
/// starts at step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub dt: f64,
    /// Prediction horizon in steps.
    pub horizon: usize,
    pub goal: Point,
    pub ego: Trajectory,
    pub agents: BTreeMap<AgentId, Trajectory>,
    pub lanes: Vec<Lane>,
    /// Free-form provenance (generator config, seed, planted weights).
    pub meta: Option<serde_json::Value>,
}

impl Scene {
    pub fn new(
        dt: f64,
        horizon: usize,
        goal: Point,
        ego: Trajectory,
        agents: BTreeMap<AgentId, Trajectory>,
        lanes: Vec<Lane>,
    ) -> Result<Self> {
        let scene = Scene {
            dt,
            horizon,
            goal,
            ego,
            agents,
            lanes,
            meta: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("scene dt must be positive, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("scene horizon must be at least 1".into()));
        }
        ensure_finite(self.goal.x, "goal")?;
        ensure_finite(self.goal.y, "goal")?;
        if self.ego.headings().is_none() {
            return Err(Error::InvalidInput("ego trajectory needs headings".into()));
        }
        for (id, t) in std::iter::once((&AgentId("ego".into()), &self.ego)).chain(&self.agents) {
            if (t.dt() - self.dt).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("trajectory {id} has dt {} != scene dt {}", t.dt(), self.dt)));
            }
        }
        Ok(())
    }

    pub fn ego_state(&self, i: usize) -> Result<EgoState> {
        self.ego.state(i)
    }

    pub fn agent_ids(&self) -> impl Iterator<Item = &AgentId> {
        self.agents.keys()
    }

    /// Rigid translation of every position in the scene.
    pub fn translated(&self, offset: Point) -> Result<Scene> {
        let shift = |t: &Trajectory| {
            Trajectory::with_states(
                t.dt(),
                t.points().iter().map(|p| p + offset).collect(),
                t.headings().map(<[f64]>::to_vec),
                t.speeds().map(<[f64]>::to_vec),
            )
        };
        let lanes = self
            .lanes
            .iter()
            .map(|l| Lane::new(l.centerline().iter().map(|p| p + offset).collect(), l.headings().to_vec()))
            .collect::<Result<_>>()?;
        Ok(Scene {
            dt: self.dt,
            horizon: self.horizon,
            goal: self.goal + offset,
            ego: shift(&self.ego)?,
            agents: self
                .agents
                .iter()
                .map(|(k, t)| Ok((k.clone(), shift(t)?)))
                .collect::<Result<_>>()?,
            lanes,
            meta: self.meta.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        let repr: SceneRepr = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        repr.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SceneRepr::from(self))?)
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path)?;
        Scene::from_json(&text).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRepr {
    dt: f64,
    horizon: usize,
    goal: [f64; 2],
    ego: EgoRepr,
    agents: BTreeMap<AgentId, AgentRepr>,
    lanes: Vec<Lane>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EgoRepr {
    states: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRepr {
    states: Vec<[f64; 2]>,
}

impl TryFrom<SceneRepr> for Scene {
    type Error = Error;

    fn try_from(r: SceneRepr) -> Result<Scene> {
        let width = r.ego.states.first().map_or(3, Vec::len);
        if !(width == 3 || width == 4) || r.ego.states.iter().any(|s| s.len() != width) {
            return Err(Error::Schema(
                "ego.states rows must all be [x, y, heading] or [x, y, heading, speed]".into(),
            ));
        }
        let ego = Trajectory::with_states(
            r.dt,
            r.ego.states.iter().map(|s| Point::new(s[0], s[1])).collect(),
            Some(r.ego.states.iter().map(|s| s[2]).collect()),
            (width == 4).then(|| r.ego.states.iter().map(|s| s[3]).collect()),
        )?;
        let agents = r
            .agents
            .into_iter()
            .map(|(id, a)| {
                let t = Trajectory::new(r.dt, a.states.iter().map(|p| Point::new(p[0], p[1])).collect())
                    .map_err(|e| Error::Schema(format!("agent {id}: {e}")))?;
                Ok((id, t))
            })
            .collect::<Result<_>>()?;
        let mut scene = Scene::new(r.dt, r.horizon, Point::new(r.goal[0], r.goal[1]), ego, agents, r.lanes)?;
        scene.meta = r.meta;
        Ok(scene)
    }
}

impl From<&Scene> for SceneRepr {
    fn from(s: &Scene) -> Self {
        let headings = s.ego.headings().expect("validated");
        let states = s
            .ego
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut row = vec![p.x, p.y, headings[i]];
                if let Some(v) = s.ego.speeds() {
                    row.push(v[i]);
                }
                row
            })
            .collect();
        SceneRepr {
            dt: s.dt,
            horizon: s.horizon,
            goal: [s.goal.x, s.goal.y],
            ego: EgoRepr { states },
            agents: s
                .agents
                .iter()
                .map(|(id, t)| {
                    (
                        id.clone(),
                        AgentRepr {
                            states: t.points().iter().map(|p| [p.x, p.y]).collect(),
                        },
                    )
                })
                .collect(),
            lanes: s.lanes.clone(),
            meta: s.meta.clone(),
        }
    }
}
