//! Accuracy metrics and their planning-informed variants.

mod detection;
mod report;
mod sensitivity;
mod sweep;
mod weighting;

pub use detection::{average_precision, match_detections, pi_average_precision, pr_curve, tighten_matches, DetectionMatch, GroundTruthBox};
pub use report::{striate, striate_quartiles, Bucket, MetricReport, MetricRow, Striation, CSV_HEADER};
pub use sensitivity::{ground_truth_boxes, sensitivity_of_detections, sensitivity_of_predictions, AgentSensitivity, SensitivityReport};
pub use sweep::{aggregate_sweep, noise_sweep, spearman, sweep_scene, SweepPoint};
pub use weighting::{pi_metric, scheme_weights, WeightingScheme};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::prediction::AgentPrediction;
use crate::trajectory::{Point, Trajectory};

/// Default isotropic bandwidth of the mixture likelihood, meters.
pub const DEFAULT_NLL_SIGMA: f64 = 0.5;

fn check_lengths(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "trajectory length",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    Ok(())
}

pub fn ade_points(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / pred.len() as f64)
}

pub fn fde_points(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok((pred[pred.len() - 1] - gt[gt.len() - 1]).norm())
}

/// Mean Euclidean waypoint error.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ade_points(pred.points(), gt.points())
}

/// Final-waypoint Euclidean error.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    fde_points(pred.points(), gt.points())
}

pub fn min_ade(pred: &AgentPrediction, gt: &[Point]) -> Result<f64> {
    min_over_modes(pred, gt, ade_points)
}

pub fn min_fde(pred: &AgentPrediction, gt: &[Point]) -> Result<f64> {
    min_over_modes(pred, gt, fde_points)
}

fn min_over_modes(pred: &AgentPrediction, gt: &[Point], f: fn(&[Point], &[Point]) -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for m in pred.modes() {
        best = best.min(f(m, gt)?);
    }
    Ok(best)
}

/// Per-step negative log density of the ground truth under the Gaussian
/// mixture `Σ_k p_k N(mode_k, σ² I)`, averaged over steps.
pub fn mixture_nll(pred: &AgentPrediction, gt: &[Point], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("NLL bandwidth must be positive, got {sigma}")));
    }
    check_lengths(&pred.modes()[0], gt)?;
    let norm = (2.0 * PI * sigma * sigma).ln();
    let mut total = 0.0;
    for (t, g) in gt.iter().enumerate() {
        // log-sum-exp over modes with positive weight
        let logs: Vec<f64> = pred
            .modes()
            .iter()
            .zip(pred.probs())
            .filter(|(_, &p)| p > 0.0)
            .map(|(m, &p)| p.ln() - (m[t] - g).norm_squared() / (2.0 * sigma * sigma) - norm)
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::InvalidInput("mixture has no mass".into()));
        }
        let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        total -= lse;
    }
    Ok(total / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn displacement_by_hand() {
        let gt = pts(&[(0.0, 0.0), (0.0, 0.0)]);
        let pred = pts(&[(1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(ade_points(&pred, &gt).unwrap(), 1.5);
        assert_eq!(fde_points(&pred, &gt).unwrap(), 2.0);
        assert_eq!(ade_points(&gt, &gt).unwrap(), 0.0);
        assert!(ade_points(&pred[..1], &gt).is_err());
    }

    #[test]
    fn min_over_modes_picks_exact_mode() {
        let gt = pts(&[(1.0, 1.0), (2.0, 2.0)]);
        let mut modes: Vec<Vec<Point>> = (0..5).map(|k| pts(&[(k as f64, 0.0), (k as f64, 1.0)])).collect();
        modes[3] = gt.clone();
        let p = AgentPrediction::new(modes, vec![0.2; 5]).unwrap();
        assert_eq!(min_ade(&p, &gt).unwrap(), 0.0);
        assert_eq!(min_fde(&p, &gt).unwrap(), 0.0);

        let single = AgentPrediction::single(pts(&[(0.0, 0.0), (0.0, 3.0)])).unwrap();
        assert_eq!(min_ade(&single, &gt).unwrap(), ade_points(&single.modes()[0], &gt).unwrap());
    }

    #[test]
    fn nll_at_the_mean() {
        let gt = pts(&[(0.5, -1.0), (1.0, 2.0), (3.0, 3.0)]);
        let p = AgentPrediction::single(gt.clone()).unwrap();
        let got = mixture_nll(&p, &gt, 1.0).unwrap();
        assert!((got - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((got - 1.837877).abs() < 1e-6);
    }

    #[test]
    fn nll_two_modes_independent() {
        let gt = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        let a = pts(&[(0.3, 0.0), (1.0, 0.4)]);
        let b = pts(&[(-1.0, 0.5), (2.0, 0.0)]);
        let p = AgentPrediction::new(vec![a.clone(), b.clone()], vec![0.5, 0.5]).unwrap();
        let s: f64 = 0.7;
        let dens = |m: &Point, g: &Point| (-(m - g).norm_squared() / (2.0 * s * s)).exp() / (2.0 * PI * s * s);
        let expected = -((0.5 * dens(&a[0], &gt[0]) + 0.5 * dens(&b[0], &gt[0])).ln()
            + (0.5 * dens(&a[1], &gt[1]) + 0.5 * dens(&b[1], &gt[1])).ln())
            / 2.0;
        assert!((mixture_nll(&p, &gt, s).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn nll_is_translation_invariant() {
        let gt = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        let m = pts(&[(0.4, 0.1), (1.3, -0.2)]);
        let shift = Point::new(13.0, -7.0);
        let moved_gt: Vec<Point> = gt.iter().map(|p| p + shift).collect();
        let moved_m: Vec<Point> = m.iter().map(|p| p + shift).collect();
        let a = mixture_nll(&AgentPrediction::single(m).unwrap(), &gt, 0.5).unwrap();
        let b = mixture_nll(&AgentPrediction::single(moved_m).unwrap(), &moved_gt, 0.5).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}
