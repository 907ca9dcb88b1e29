use std::collections::BTreeMap;

use serde::Serialize;

use super::detection::GroundTruthBox;
use crate::cost::{AgentGradient, CostModel, SensitivityWindow, WindowKind};
use crate::error::Result;
use crate::prediction::{DetectionBox, DetectionSet, PredictionSet};
use crate::scene::{AgentId, Scene};
use crate::sim::{BOX_LENGTH, BOX_WIDTH};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSensitivity {
    pub agent: AgentId,
    /// Norm of the stacked cost gradient over the evaluated outputs.
    pub g: f64,
    /// Same quantity with the ground truth in place of the evaluated
    /// output, when the agent is known.
    pub g_gt: Option<f64>,
    /// Gradient with respect to the current (detected) position.
    pub position_gradient: [f64; 2],
    /// `[mode][waypoint]` gradients; empty for detections.
    pub waypoint_gradients: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub kind: &'static str,
    pub frame: usize,
    pub agents: Vec<AgentSensitivity>,
}

impl SensitivityReport {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.g).collect()
    }

    pub fn by_agent(&self) -> BTreeMap<AgentId, f64> {
        self.agents.iter().map(|a| (a.agent.clone(), a.g)).collect()
    }

    /// Ground-truth sensitivities, or `None` if any agent lacks one.
    pub fn ground_truth(&self) -> Option<Vec<f64>> {
        self.agents.iter().map(|a| a.g_gt).collect()
    }
}

fn row(grad: &AgentGradient, kind: WindowKind, g_gt: Option<f64>) -> AgentSensitivity {
    AgentSensitivity {
        agent: grad.agent.clone(),
        g: grad.magnitude(kind),
        g_gt,
        position_gradient: [grad.current.x, grad.current.y],
        waypoint_gradients: grad
            .waypoints
            .iter()
            .map(|m| m.iter().map(|p| [p.x, p.y]).collect())
            .collect(),
    }
}

/// Sensitivity of the planning cost to each agent's predicted waypoints,
/// and to its logged future in their place.
pub fn sensitivity_of_predictions(model: &CostModel, scene: &Scene, plan: &Trajectory, predictions: &PredictionSet) -> Result<SensitivityReport> {
    let window = SensitivityWindow::for_predictions(model, scene, plan, predictions)?;
    let gt_window = SensitivityWindow::for_ground_truth(model, scene, plan, predictions)?;
    let grads = window.gradient()?;
    let gt_grads = gt_window.gradient()?;
    Ok(SensitivityReport {
        kind: "prediction",
        frame: predictions.frame,
        agents: grads
            .iter()
            .zip(&gt_grads)
            .map(|(g, gt)| row(g, WindowKind::Prediction, Some(gt.magnitude(WindowKind::Prediction))))
            .collect(),
    })
}

/// Logged agent positions at `frame`.
pub fn ground_truth_boxes(scene: &Scene, frame: usize) -> Vec<GroundTruthBox> {
    scene
        .agents
        .iter()
        .filter(|(_, t)| frame < t.len())
        .map(|(id, t)| GroundTruthBox {
            agent: id.clone(),
            center: t.points()[frame],
        })
        .collect()
}

fn exact_detections(scene: &Scene, frame: usize) -> Result<DetectionSet> {
    let boxes = ground_truth_boxes(scene, frame)
        .into_iter()
        .map(|g| DetectionBox {
            x: g.center.x,
            y: g.center.y,
            width: BOX_WIDTH,
            length: BOX_LENGTH,
            heading: 0.0,
            score: 1.0,
            agent: Some(g.agent),
        })
        .collect();
    DetectionSet::new(frame, boxes)
}

/// Sensitivity of the planning cost to each detected position. The
/// ground-truth value of a matched box is the sensitivity of the same
/// agent when every agent is detected exactly.
pub fn sensitivity_of_detections(model: &CostModel, scene: &Scene, plan: &Trajectory, detections: &DetectionSet) -> Result<SensitivityReport> {
    let grads = SensitivityWindow::for_detections(model, scene, plan, detections)?.gradient()?;
    let exact = exact_detections(scene, detections.frame)?;
    let truth: BTreeMap<AgentId, f64> = SensitivityWindow::for_detections(model, scene, plan, &exact)?
        .gradient()?
        .iter()
        .map(|g| (g.agent.clone(), g.magnitude(WindowKind::Detection)))
        .collect();
    Ok(SensitivityReport {
        kind: "detection",
        frame: detections.frame,
        agents: grads
            .iter()
            .zip(&detections.boxes)
            .map(|(g, b)| {
                let gt = b.agent.as_ref().and_then(|id| truth.get(id)).copied();
                row(g, WindowKind::Detection, gt)
            })
            .collect(),
    })
}
