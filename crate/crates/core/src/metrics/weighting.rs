use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a per-agent sensitivity becomes a metric weight `f ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingScheme {
    /// `f = 1`
    Uniform,
    /// `f = 1 + g_a / Σ g`
    Normalize,
    /// `f = 1 + exp(g_a) / Σ exp(g)`
    Softmax,
    /// `f = 1 + max(0, g_a − g_gt)`
    Hinge,
}

impl FromStr for WeightingScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "normalize" => Ok(Self::Normalize),
            "softmax" => Ok(Self::Softmax),
            "hinge" => Ok(Self::Hinge),
            _ => Err(Error::InvalidInput(format!("unknown weighting scheme {s:?}"))),
        }
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Normalize => "normalize",
            Self::Softmax => "softmax",
            Self::Hinge => "hinge",
        })
    }
}

/// Per-agent weights. A zero total sensitivity makes NORMALIZE uniform.
pub fn scheme_weights(g: &[f64], g_gt: Option<&[f64]>, scheme: WeightingScheme) -> Result<Vec<f64>> {
    if g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("sensitivities must be finite and non-negative".into()));
    }
    Ok(match scheme {
        WeightingScheme::Uniform => vec![1.0; g.len()],
        WeightingScheme::Normalize => {
            let total: f64 = g.iter().sum();
            if total > 0.0 {
                g.iter().map(|v| 1.0 + v / total).collect()
            } else {
                vec![1.0; g.len()]
            }
        }
        WeightingScheme::Softmax => {
            let top = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = g.iter().map(|v| (v - top).exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|v| 1.0 + v / total).collect()
        }
        WeightingScheme::Hinge => {
            let gt = g_gt.ok_or_else(|| Error::InvalidInput("hinge weighting needs ground-truth sensitivities".into()))?;
            if gt.len() != g.len() {
                return Err(Error::DimensionMismatch {
                    what: "ground-truth sensitivities",
                    expected: g.len(),
                    got: gt.len(),
                });
            }
            g.iter().zip(gt).map(|(a, b)| 1.0 + (a - b).max(0.0)).collect()
        }
    })
}

/// `(1/|A|) Σ_a f(a) · metric_a`.
pub fn pi_metric(values: &[f64], g: &[f64], g_gt: Option<&[f64]>, scheme: WeightingScheme) -> Result<f64> {
    if values.len() != g.len() {
        return Err(Error::DimensionMismatch {
            what: "per-agent sensitivities",
            expected: values.len(),
            got: g.len(),
        });
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("no agents to average over".into()));
    }
    let w = scheme_weights(g, g_gt, scheme)?;
    Ok(values.iter().zip(&w).map(|(m, f)| f * m).sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_sensitivity_hinge_is_plain_mean() {
        let v = [0.3, 1.1, 0.7];
        let got = pi_metric(&v, &[0.0; 3], Some(&[0.0; 3]), WeightingScheme::Hinge).unwrap();
        assert_eq!(got, v.iter().sum::<f64>() / 3.0);
    }

    #[test]
    fn normalize_by_hand() {
        assert_eq!(pi_metric(&[1.0, 1.0], &[1.0, 1.0], None, WeightingScheme::Normalize).unwrap(), 1.5);
        assert_eq!(scheme_weights(&[0.0, 0.0], None, WeightingScheme::Normalize).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn hinge_head_on_numbers() {
        let w = scheme_weights(&[0.90], Some(&[0.57]), WeightingScheme::Hinge).unwrap();
        assert!((w[0] - 1.33).abs() < 1e-12);
        assert!(scheme_weights(&[0.9], None, WeightingScheme::Hinge).is_err());
    }

    #[test]
    fn scheme_names_parse() {
        for s in [WeightingScheme::Uniform, WeightingScheme::Normalize, WeightingScheme::Softmax, WeightingScheme::Hinge] {
            assert_eq!(s.to_string().parse::<WeightingScheme>().unwrap(), s);
        }
        assert!("linear".parse::<WeightingScheme>().is_err());
    }

    proptest! {
        #[test]
        fn uniform_is_the_plain_mean(v in proptest::collection::vec(0.0f64..10.0, 1..12), seed in 0.0f64..5.0) {
            let g: Vec<f64> = v.iter().map(|x| (x * seed).sin().abs()).collect();
            let plain = v.iter().sum::<f64>() / v.len() as f64;
            prop_assert_eq!(pi_metric(&v, &g, None, WeightingScheme::Uniform).unwrap(), plain);
        }

        #[test]
        fn normalize_and_softmax_share_one_unit(g in proptest::collection::vec(0.01f64..5.0, 2..10)) {
            for scheme in [WeightingScheme::Normalize, WeightingScheme::Softmax] {
                let w = scheme_weights(&g, None, scheme).unwrap();
                let extra: f64 = w.iter().map(|f| f - 1.0).sum();
                prop_assert!((extra - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|&f| f > 1.0 && f < 2.0));
            }
        }

        #[test]
        fn pi_metric_is_monotone(
            v in proptest::collection::vec(0.0f64..10.0, 1..8),
            g in proptest::collection::vec(0.0f64..3.0, 8),
            idx in 0usize..8,
            bump in 0.0f64..5.0,
        ) {
            let g = &g[..v.len()];
            let i = idx % v.len();
            let mut w = v.clone();
            w[i] += bump;
            for scheme in [WeightingScheme::Uniform, WeightingScheme::Normalize, WeightingScheme::Softmax] {
                prop_assert!(pi_metric(&w, g, None, scheme).unwrap() >= pi_metric(&v, g, None, scheme).unwrap());
            }
        }
    }
}
