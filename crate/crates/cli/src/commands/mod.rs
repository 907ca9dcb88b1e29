pub mod evaluate;
pub mod fit;
pub mod model;
pub mod reopt;
pub mod scenes;
pub mod sweep;

use plansense::cost::{default_sigma, CostModel, FeatureSet, RbfParams, Theta};

use crate::error::{CliError, CliResult};

pub fn parse_feature_set(s: &str) -> Result<FeatureSet, String> {
    match s.to_ascii_lowercase().as_str() {
        "toy4" => Ok(FeatureSet::Toy4),
        "drive6" => Ok(FeatureSet::Drive6),
        _ => Err(format!("unknown feature set {s:?} (expected toy4 or drive6)")),
    }
}

/// Weights used to generate demonstrations when none are given.
pub fn default_theta(fs: FeatureSet) -> Vec<f64> {
    match fs {
        FeatureSet::Toy4 => vec![1.0, 4.0, 0.4, 0.4],
        FeatureSet::Drive6 => vec![1.722, 0.562, 0.05, 11.865, 1.352, 0.241],
    }
}

pub fn build_model(fs: FeatureSet, theta: Option<&[f64]>, sigma: Option<f64>, horizon: usize) -> CliResult<CostModel> {
    let weights = theta.map_or_else(|| default_theta(fs), <[f64]>::to_vec);
    let theta = Theta::new(fs, weights)?;
    let rbf = RbfParams::new(sigma.unwrap_or_else(|| default_sigma(fs)))?;
    Ok(CostModel::new(theta, rbf, horizon)?)
}

/// Mixes the run seed with an index so per-item streams are independent.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn require_horizon(scenes: &[(String, plansense::scene::Scene)]) -> CliResult<usize> {
    let h = scenes[0].1.horizon;
    if let Some((id, s)) = scenes.iter().find(|(_, s)| s.horizon != h) {
        return Err(CliError::Input(format!("{id}: horizon {} differs from {h}", s.horizon)));
    }
    Ok(h)
}
