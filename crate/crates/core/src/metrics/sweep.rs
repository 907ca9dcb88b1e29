use serde::Serialize;

use super::sensitivity::sensitivity_of_detections;
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::sim::{perturb_detections, PerturbationSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub mean: f64,
    pub ci95: f64,
    pub samples: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (scene, frame, trial) triple. It does not depend on the
/// noise level, so every grid point scales the same standard-normal draws.
fn trial_seed(seed: u64, scene: usize, frame: usize, trial: usize) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ scene as u64) ^ frame as u64) ^ trial as u64)
}

/// Sensitivities of every detected agent, per grid point, for one scene
/// evaluated at each of `frames` against its logged ego trajectory.
/// Frames past the ego trajectory are skipped.
pub fn sweep_scene(
    scene: &Scene,
    model: &CostModel,
    grid: &[f64],
    trials: usize,
    frames: &[usize],
    seed: u64,
    scene_index: usize,
) -> Result<Vec<Vec<f64>>> {
    grid.iter()
        .map(|&sigma| {
            let mut out = Vec::new();
            for &frame in frames.iter().filter(|&&f| f < scene.ego.len()) {
                for trial in 0..trials {
                    let spec = PerturbationSpec {
                        sigma,
                        seed: trial_seed(seed, scene_index, frame, trial),
                    };
                    let dets = perturb_detections(scene, frame, &spec)?;
                    let report = sensitivity_of_detections(model, scene, &scene.ego, &dets)?;
                    out.extend(report.magnitudes());
                }
            }
            Ok(out)
        })
        .collect()
}

/// Mean sensitivity and 95% half-width per grid point from per-scene
/// samples (as returned by [`sweep_scene`]).
pub fn aggregate_sweep(grid: &[f64], per_scene: &[Vec<Vec<f64>>]) -> Vec<SweepPoint> {
    grid.iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let all: Vec<f64> = per_scene.iter().flat_map(|s| s[i].iter().copied()).collect();
            let n = all.len();
            let mean = if n > 0 { all.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let ci95 = if n > 1 {
                let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                1.96 * (var / n as f64).sqrt()
            } else {
                0.0
            };
            SweepPoint { sigma, mean, ci95, samples: n }
        })
        .collect()
}

/// Detection-noise sweep over a batch of scenes.
pub fn noise_sweep(scenes: &[Scene], model: &CostModel, grid: &[f64], trials: usize, frames: &[usize], seed: u64) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("noise grid is empty".into()));
    }
    if frames.is_empty() {
        return Err(Error::InvalidInput("no evaluation frames".into()));
    }
    let per_scene = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| sweep_scene(s, model, grid, trials, frames, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_sweep(grid, &per_scene))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}
