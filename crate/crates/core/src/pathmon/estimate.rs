use serde::{Deserialize, Serialize};

use super::sim::PathSampleSet;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EstimateError {
    #[error("link {0} has fewer than two paired samples")]
    InsufficientSamples(usize),
    #[error("link {0} has a zero denominator")]
    ZeroDenominator(usize),
}

/// Delay statistics of link `link` (1-based: from node `link - 1` to `link`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub link: usize,
    pub mean: f64,
    pub variance: f64,
    pub samples: usize,
}

/// Successive-segment differencing. Link `i` uses the pairs
/// `(Y_{i-1}, Y_i)` of every record that reached node `i`, with `Y_0 = 0`,
/// and unbiased sample moments.
pub fn estimate_link_delay(s: &PathSampleSet) -> Result<Vec<DelayEstimate>, EstimateError> {
    (1..=s.links())
        .map(|i| {
            let pairs: Vec<(f64, f64)> = s
                .records
                .iter()
                .filter(|r| r.len() >= i)
                .map(|r| (if i == 1 { 0.0 } else { r[i - 2] }, r[i - 1]))
                .collect();
            let n = pairs.len();
            if n < 2 {
                return Err(EstimateError::InsufficientSamples(i));
            }
            let nf = n as f64;
            let (mp, mc) = pairs.iter().fold((0.0, 0.0), |(a, b), &(p, c)| (a + p, b + c));
            let (mp, mc) = (mp / nf, mc / nf);
            let (mut vp, mut vc, mut cov) = (0.0, 0.0, 0.0);
            for &(p, c) in &pairs {
                vp += (p - mp) * (p - mp);
                vc += (c - mc) * (c - mc);
                cov += (p - mp) * (c - mc);
            }
            let d = nf - 1.0;
            let variance = (vc / d + vp / d - 2.0 * cov / d).max(0.0);
            Ok(DelayEstimate { link: i, mean: mc - mp, variance, samples: n })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMethod {
    /// Node packet counters carried by the mules.
    Counter,
    /// How far each measurement record's timestamp trail reaches.
    Consistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub link: usize,
    pub delivery: f64,
    pub loss: f64,
    /// Sampling noise pushed the delivery ratio above 1.
    pub over_one: bool,
}

pub fn estimate_link_loss(s: &PathSampleSet, method: LossMethod) -> Result<Vec<LossEstimate>, EstimateError> {
    let reach = |i: usize| s.records.iter().filter(|r| r.len() >= i).count() as f64;
    (1..=s.links())
        .map(|i| {
            let (num, den) = match method {
                LossMethod::Counter => (s.counters[i].received as f64, s.counters[i - 1].sent as f64),
                LossMethod::Consistency => (reach(i), reach(i - 1)),
            };
            if den == 0.0 {
                return Err(EstimateError::ZeroDenominator(i));
            }
            let delivery = num / den;
            Ok(LossEstimate { link: i, delivery, loss: 1.0 - delivery, over_one: delivery > 1.0 })
        })
        .collect()
}

/// Root-mean-squared error of repeated estimates of a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub per_link: Vec<f64>,
    pub aggregate: f64,
}

/// `runs[s][i]` is run `s`'s estimate for link `i`.
pub fn rmse(runs: &[Vec<f64>], truth: &[f64]) -> Rmse {
    assert!(!runs.is_empty(), "no runs");
    assert!(runs.iter().all(|r| r.len() == truth.len()), "link sets differ");
    let n = runs.len() as f64;
    let per_link: Vec<f64> = (0..truth.len())
        .map(|i| (runs.iter().map(|r| (r[i] - truth[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let aggregate = (per_link.iter().map(|e| e * e).sum::<f64>() / truth.len().max(1) as f64).sqrt();
    Rmse { per_link, aggregate }
}
