//! Center-distance average precision, with the planning-informed variant
//! that tightens the match threshold on sensitive agents.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::prediction::DetectionSet;
use crate::scene::AgentId;
use crate::trajectory::Point;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub agent: AgentId,
    pub center: Point,
}

/// Outcome of one detection, in descending score order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionMatch {
    /// Index into the detection set.
    pub detection: usize,
    pub score: f64,
    /// Matched ground-truth agent and center distance.
    pub matched: Option<(AgentId, f64)>,
}

/// Greedy matching by descending score: each detection takes the nearest
/// unmatched ground truth within `threshold`. Score ties keep input order.
pub fn match_detections(detections: &DetectionSet, gt: &[GroundTruthBox], threshold: f64) -> Result<Vec<DetectionMatch>> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidInput(format!("match threshold must be positive, got {threshold}")));
    }
    let mut order: Vec<usize> = (0..detections.boxes.len()).collect();
    order.sort_by(|&a, &b| detections.boxes[b].score.total_cmp(&detections.boxes[a].score));
    let mut taken = vec![false; gt.len()];
    Ok(order
        .into_iter()
        .map(|i| {
            let c = detections.boxes[i].center();
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let d = (c - g.center).norm();
                if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            DetectionMatch {
                detection: i,
                score: detections.boxes[i].score,
                matched: best.map(|(j, d)| (gt[j].agent.clone(), d)),
            }
        })
        .collect())
}

/// Cumulative (recall, precision) after each ranked detection.
pub fn pr_curve(matches: &[DetectionMatch], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    matches
        .iter()
        .enumerate()
        .map(|(rank, m)| {
            if m.matched.is_some() {
                tp += 1;
            }
            (tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64)
        })
        .collect()
}

/// Area under the precision envelope sampled at 101 recall levels.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, prec)| prec)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

/// Average precision, or `None` when there is no ground truth to find.
pub fn average_precision(detections: &DetectionSet, gt: &[GroundTruthBox], threshold: f64) -> Result<Option<f64>> {
    let matches = match_detections(detections, gt, threshold)?;
    if gt.is_empty() {
        return Ok(None);
    }
    Ok(Some(interpolated_ap(&pr_curve(&matches, gt.len()))))
}

/// Drops matches to agent `a` that lie farther than `threshold / (1 + g_a)`.
pub fn tighten_matches(matches: &mut [DetectionMatch], threshold: f64, sensitivity: &BTreeMap<AgentId, f64>) -> Result<()> {
    for m in matches {
        if let Some((agent, d)) = &m.matched {
            let g = *sensitivity
                .get(agent)
                .ok_or_else(|| Error::InvalidInput(format!("no sensitivity for agent {agent}")))?;
            if !(g >= 0.0) {
                return Err(Error::InvalidInput(format!("negative sensitivity for agent {agent}")));
            }
            if *d > threshold / (1.0 + g) {
                m.matched = None;
            }
        }
    }
    Ok(())
}

/// Average precision where a match to agent `a` only counts if it lies
/// within `threshold / (1 + g_a)`. Matching itself uses the base threshold,
/// so shrinking thresholds can only turn true positives into false
/// positives and the result never exceeds the plain AP.
pub fn pi_average_precision(
    detections: &DetectionSet,
    gt: &[GroundTruthBox],
    threshold: f64,
    sensitivity: &BTreeMap<AgentId, f64>,
) -> Result<Option<f64>> {
    let mut matches = match_detections(detections, gt, threshold)?;
    if gt.is_empty() {
        return Ok(None);
    }
    tighten_matches(&mut matches, threshold, sensitivity)?;
    Ok(Some(interpolated_ap(&pr_curve(&matches, gt.len()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction::DetectionBox;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, score: f64) -> DetectionBox {
        DetectionBox { x, y, width: 1.8, length: 4.5, heading: 0.0, score, agent: None }
    }

    fn gt(id: &str, x: f64, y: f64) -> GroundTruthBox {
        GroundTruthBox { agent: AgentId::from(id), center: Point::new(x, y) }
    }

    #[test]
    fn single_match_and_miss() {
        let d = DetectionSet::new(0, vec![det(0.3, 0.0, 0.9)]).unwrap();
        let g = [gt("a", 0.0, 0.0)];
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), Some(1.0));
        assert_eq!(average_precision(&d, &g, 0.25).unwrap(), Some(0.0));
        assert_eq!(average_precision(&DetectionSet::new(0, vec![]).unwrap(), &g, 0.5).unwrap(), Some(0.0));
        assert_eq!(average_precision(&d, &[], 0.5).unwrap(), None);
    }

    #[test]
    fn mixed_case_by_hand() {
        // ranked: d0 (0.9) hits a, d1 (0.8) false, d2 (0.7) hits b, d3 (0.6) hits c
        let d = DetectionSet::new(
            0,
            vec![det(0.1, 0.0, 0.9), det(5.0, 5.0, 0.8), det(2.0, 0.2, 0.7), det(4.0, -0.3, 0.6)],
        )
        .unwrap();
        let g = [gt("a", 0.0, 0.0), gt("b", 2.0, 0.0), gt("c", 4.0, 0.0)];
        let m = match_detections(&d, &g, 0.5).unwrap();
        let curve = pr_curve(&m, 3);
        let expected = [(1.0 / 3.0, 1.0), (1.0 / 3.0, 0.5), (2.0 / 3.0, 2.0 / 3.0), (1.0, 0.75)];
        for (c, e) in curve.iter().zip(expected) {
            assert!((c.0 - e.0).abs() < 1e-15 && (c.1 - e.1).abs() < 1e-15);
        }
        // envelope: 1.0 for r <= 1/3 (34 levels), 0.75 above (67 levels)
        let ap = average_precision(&d, &g, 0.5).unwrap().unwrap();
        assert!((ap - (34.0 * 1.0 + 67.0 * 0.75) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn sensitive_agent_needs_tighter_box() {
        let d = DetectionSet::new(0, vec![det(0.3, 0.0, 0.9)]).unwrap();
        let g = [gt("a", 0.0, 0.0)];
        let mut s = BTreeMap::new();
        s.insert(AgentId::from("a"), 1.0);
        assert_eq!(average_precision(&d, &g, 0.5).unwrap(), Some(1.0));
        assert_eq!(pi_average_precision(&d, &g, 0.5, &s).unwrap(), Some(0.0));
        s.insert(AgentId::from("a"), 0.0);
        assert_eq!(pi_average_precision(&d, &g, 0.5, &s).unwrap(), Some(1.0));
    }

    proptest! {
        #[test]
        fn pi_ap_never_exceeds_ap(
            dets in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..=1.0), 0..8),
            gts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..3.0), 1..6),
            threshold in 0.1f64..2.0,
        ) {
            let d = DetectionSet::new(0, dets.iter().map(|&(x, y, s)| det(x, y, s)).collect()).unwrap();
            let g: Vec<GroundTruthBox> = gts.iter().enumerate().map(|(i, &(x, y, _))| gt(&format!("a{i}"), x, y)).collect();
            let s: BTreeMap<AgentId, f64> = gts.iter().enumerate().map(|(i, &(_, _, g))| (AgentId(format!("a{i}")), g)).collect();
            let ap = average_precision(&d, &g, threshold).unwrap().unwrap();
            let pi = pi_average_precision(&d, &g, threshold, &s).unwrap().unwrap();
            prop_assert!(pi <= ap);
        }
    }
}
