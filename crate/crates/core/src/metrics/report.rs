use serde::Serialize;

use super::weighting::{pi_metric, scheme_weights, WeightingScheme};
use crate::error::{Error, Result};
use crate::scene::AgentId;

/// Metric values of the agents whose sensitivity falls in `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: Option<f64>,
    /// Half-width of the normal-approximation 95% interval; needs two
    /// samples.
    pub ci95: Option<f64>,
}

fn summarize(lo: f64, hi: f64, values: &[f64]) -> Bucket {
    let n = values.len();
    let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
    let ci95 = mean.filter(|_| n > 1).map(|m| {
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    });
    Bucket { lo, hi, count: n, mean, ci95 }
}

fn check_aligned(values: &[f64], g: &[f64]) -> Result<()> {
    if values.len() != g.len() {
        return Err(Error::DimensionMismatch {
            what: "per-agent sensitivities",
            expected: values.len(),
            got: g.len(),
        });
    }
    Ok(())
}

/// Buckets `[e_i, e_{i+1})` over strictly increasing edges; values outside
/// every bucket are left out.
pub fn striate(values: &[f64], g: &[f64], edges: &[f64]) -> Result<Vec<Bucket>> {
    check_aligned(values, g)?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("bucket edges must be strictly increasing, at least two".into()));
    }
    Ok(edges
        .windows(2)
        .map(|w| {
            let inside: Vec<f64> = values
                .iter()
                .zip(g)
                .filter(|(_, &s)| s >= w[0] && s < w[1])
                .map(|(&v, _)| v)
                .collect();
            summarize(w[0], w[1], &inside)
        })
        .collect())
}

/// Four rank-based buckets of (nearly) equal size. Each bucket reports the
/// sensitivity range of its members, so ties at a quartile boundary cannot
/// drop an agent.
pub fn striate_quartiles(values: &[f64], g: &[f64]) -> Result<Vec<Bucket>> {
    Ok(quartile_assignment(values, g)?.1)
}

fn quartile_assignment(values: &[f64], g: &[f64]) -> Result<(Vec<usize>, Vec<Bucket>)> {
    check_aligned(values, g)?;
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g[a].total_cmp(&g[b]));
    let mut bucket = vec![0; n];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for (rank, &i) in order.iter().enumerate() {
        let b = rank * 4 / n.max(1);
        bucket[i] = b;
        members[b].push(i);
    }
    let buckets = members
        .iter()
        .map(|m| {
            let lo = m.iter().map(|&i| g[i]).fold(f64::INFINITY, f64::min);
            let hi = m.iter().map(|&i| g[i]).fold(f64::NEG_INFINITY, f64::max);
            let v: Vec<f64> = m.iter().map(|&i| values[i]).collect();
            if m.is_empty() {
                summarize(f64::NAN, f64::NAN, &v)
            } else {
                summarize(lo, hi, &v)
            }
        })
        .collect();
    Ok((bucket, buckets))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub agent: AgentId,
    pub raw: f64,
    pub sensitivity: f64,
    pub weight: f64,
    pub pi_value: f64,
    pub bucket: Option<usize>,
}

/// Raw and planning-informed value of one metric over a set of agents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub scheme: WeightingScheme,
    pub raw: f64,
    pub pi: f64,
    pub rows: Vec<MetricRow>,
    pub buckets: Vec<Bucket>,
}

pub enum Striation<'a> {
    None,
    Quartiles,
    Edges(&'a [f64]),
}

impl MetricReport {
    pub fn build(
        metric: &str,
        agents: &[AgentId],
        values: &[f64],
        g: &[f64],
        g_gt: Option<&[f64]>,
        scheme: WeightingScheme,
        striation: Striation,
    ) -> Result<Self> {
        check_aligned(values, g)?;
        if agents.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "agent ids",
                expected: values.len(),
                got: agents.len(),
            });
        }
        let weights = scheme_weights(g, g_gt, scheme)?;
        let pi = pi_metric(values, g, g_gt, scheme)?;
        let raw = values.iter().sum::<f64>() / values.len() as f64;
        let (assignment, buckets) = match striation {
            Striation::None => (vec![None; values.len()], Vec::new()),
            Striation::Quartiles => {
                let (a, b) = quartile_assignment(values, g)?;
                (a.into_iter().map(Some).collect(), b)
            }
            Striation::Edges(edges) => {
                let b = striate(values, g, edges)?;
                let a = g
                    .iter()
                    .map(|&s| edges.windows(2).position(|w| s >= w[0] && s < w[1]))
                    .collect();
                (a, b)
            }
        };
        let rows = agents
            .iter()
            .zip(values)
            .zip(g)
            .zip(&weights)
            .zip(assignment)
            .map(|((((agent, &raw), &sensitivity), &weight), bucket)| MetricRow {
                agent: agent.clone(),
                raw,
                sensitivity,
                weight,
                pi_value: weight * raw,
                bucket,
            })
            .collect();
        Ok(Self {
            metric: metric.to_owned(),
            scheme,
            raw,
            pi,
            rows,
            buckets,
        })
    }

    /// Rows as `agent_id,metric,raw,sensitivity,weight,pi_value,bucket`.
    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.agent,
                    self.metric,
                    r.raw,
                    r.sensitivity,
                    r.weight,
                    r.pi_value,
                    r.bucket.map_or(String::new(), |b| b.to_string())
                )
            })
            .collect()
    }
}

pub const CSV_HEADER: &str = "agent_id,metric,raw,sensitivity,weight,pi_value,bucket";
