//! Linear planning cost `c = theta . phi` over hand-built features, with
//! analytic derivatives with respect to ego controls and agent positions.

mod expansion;
mod problem;
mod window;

use serde::{Deserialize, Serialize};

use crate::dynamics::Dynamics;
use crate::error::{ensure_finite, Error, Result};

pub use problem::{combine, scene_frames, AgentObservation, ControlDerivatives, ControlProblem, Frame};
pub use window::{ground_truth_predictions, AgentGradient, SensitivityWindow, WindowKind};

/// Feature set identifier. `Toy4` is the four-term collision-avoidance
/// cost (goal, effort, reactive and one-step proactive RBFs); `Drive6` adds
/// lane deviation and lane heading terms and replaces the proactive term by
/// an expected closest approach over the prediction horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Toy4,
    Drive6,
}

impl FeatureSet {
    pub fn len(self) -> usize {
        match self {
            FeatureSet::Toy4 => 4,
            FeatureSet::Drive6 => 6,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn dynamics(self) -> Dynamics {
        match self {
            FeatureSet::Toy4 => Dynamics::Unicycle,
            FeatureSet::Drive6 => Dynamics::ExtendedUnicycle,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            FeatureSet::Toy4 => &["goal", "effort", "reactive_rbf", "proactive_rbf"],
            FeatureSet::Drive6 => &[
                "lane_offset",
                "lane_heading",
                "goal",
                "reactive_rbf",
                "effort",
                "prediction_rbf",
            ],
        }
    }

    /// Index of the prediction-driven feature.
    pub fn prediction_feature(self) -> usize {
        match self {
            FeatureSet::Toy4 => 3,
            FeatureSet::Drive6 => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    feature_set: FeatureSet,
    weights: Vec<f64>,
}

impl Theta {
    pub fn new(feature_set: FeatureSet, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != feature_set.len() {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected: feature_set.len(),
                got: weights.len(),
            });
        }
        for &w in &weights {
            ensure_finite(w, "theta")?;
        }
        Ok(Self { feature_set, weights })
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.feature_set
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            feature_set: self.feature_set,
            weights: self.weights.iter().map(|w| w * alpha).collect(),
        }
    }

    pub fn cosine_similarity(&self, other: &Theta) -> f64 {
        let dot: f64 = self.weights.iter().zip(&other.weights).map(|(a, b)| a * b).sum();
        let na: f64 = self.weights.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.weights.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfParams {
    sigma: f64,
}

impl RbfParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(Self { sigma })
        } else {
            Err(Error::InvalidInput(format!("RBF bandwidth must be positive, got {sigma}")))
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Gaussian radial basis function `exp(-d^2 / (2 sigma^2))`.
pub fn rbf(d: f64, params: RbfParams) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::InvalidInput(format!("distance must be non-negative, got {d}")));
    }
    Ok(rbf_unchecked(d * d, params.sigma))
}

#[inline]
pub(crate) fn rbf_unchecked(d_squared: f64, sigma: f64) -> f64 {
    (-d_squared / (2.0 * sigma * sigma)).exp()
}

/// Default bandwidths: 1 m for the toy arena, 3 m for driving scenes.
pub fn default_sigma(feature_set: FeatureSet) -> f64 {
    match feature_set {
        FeatureSet::Toy4 => 1.0,
        FeatureSet::Drive6 => 3.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub feature_set: FeatureSet,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub theta: Theta,
    pub rbf: RbfParams,
    /// Prediction horizon in steps.
    pub horizon: usize,
    pub dynamics: Dynamics,
}

impl CostModel {
    pub fn new(theta: Theta, rbf: RbfParams, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidInput("cost horizon must be at least 1".into()));
        }
        let dynamics = theta.feature_set().dynamics();
        Ok(Self {
            theta,
            rbf,
            horizon,
            dynamics,
        })
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.theta.feature_set()
    }

    pub fn with_theta(&self, theta: Theta) -> Result<Self> {
        if theta.feature_set() != self.feature_set() {
            return Err(Error::InvalidInput("theta feature set does not match the model".into()));
        }
        Ok(Self { theta, ..self.clone() })
    }

    /// Same model with one feature's weight set to zero.
    pub fn without_feature(&self, index: usize) -> Self {
        let mut weights = self.theta.weights.clone();
        weights[index] = 0.0;
        Self {
            theta: Theta {
                feature_set: self.feature_set(),
                weights,
            },
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CostModelRepr::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: CostModelRepr = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        r.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostModelRepr {
    feature_set: FeatureSet,
    theta: Vec<f64>,
    sigma: f64,
    horizon: usize,
    dynamics: Dynamics,
}

impl From<&CostModel> for CostModelRepr {
    fn from(m: &CostModel) -> Self {
        Self {
            feature_set: m.feature_set(),
            theta: m.theta.weights.clone(),
            sigma: m.rbf.sigma,
            horizon: m.horizon,
            dynamics: m.dynamics,
        }
    }
}

impl TryFrom<CostModelRepr> for CostModel {
    type Error = Error;
    fn try_from(r: CostModelRepr) -> Result<Self> {
        let model = CostModel::new(Theta::new(r.feature_set, r.theta)?, RbfParams::new(r.sigma)?, r.horizon)?;
        if r.dynamics != model.dynamics {
            return Err(Error::Schema(format!(
                "feature set {:?} requires {:?} dynamics",
                r.feature_set, model.dynamics
            )));
        }
        Ok(model)
    }
}

/// `theta . phi`.
pub fn cost_eval(model: &CostModel, phi: &FeatureVector) -> Result<f64> {
    if phi.feature_set != model.feature_set() || phi.values.len() != model.theta.weights.len() {
        return Err(Error::DimensionMismatch {
            what: "feature vector",
            expected: model.theta.weights.len(),
            got: phi.values.len(),
        });
    }
    Ok(model.theta.weights.iter().zip(&phi.values).map(|(w, f)| w * f).sum())
}
