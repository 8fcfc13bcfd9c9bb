use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{estimate_link_delay, estimate_link_loss, rmse, DelayEstimate, LossEstimate, LossMethod};
use super::sim::{simulate, ConfigError, GroundTruth, SimConfig};

/// `start, start + step, ...` up to and including `end` (within rounding).
pub fn alpha_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9).collect()
}

/// RMSE of one link at one α across all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub link: usize,
    pub delay_mean_rmse: f64,
    pub delay_var_rmse: f64,
    pub loss_counter_rmse: f64,
    pub loss_consistency_rmse: f64,
}

struct Outcome {
    alpha: usize,
    truth: GroundTruth,
    delay: Vec<DelayEstimate>,
    counter: Vec<LossEstimate>,
    consistency: Vec<LossEstimate>,
}

/// Runs every α with seeds `base.seed .. base.seed + seeds`. Runs execute in
/// parallel; the result does not depend on scheduling.
pub fn sweep(base: &SimConfig, alphas: &[f64], seeds: u64) -> Result<Vec<SweepRow>, ConfigError> {
    base.validate()?;
    let jobs: Vec<(usize, u64)> = (0..alphas.len()).flat_map(|a| (0..seeds).map(move |s| (a, s))).collect();
    let runs: Vec<_> = jobs
        .par_iter()
        .map(|&(a, s)| {
            let cfg = SimConfig { alpha: alphas[a], seed: base.seed.wrapping_add(s), ..base.clone() };
            let run = simulate(&cfg).expect("validated");
            Outcome {
                alpha: a,
                delay: estimate_link_delay(&run.samples).unwrap_or_default(),
                counter: estimate_link_loss(&run.samples, LossMethod::Counter).unwrap_or_default(),
                consistency: estimate_link_loss(&run.samples, LossMethod::Consistency).unwrap_or_default(),
                truth: run.truth,
            }
        })
        .collect();

    let links = base.links.len();
    let mut rows = Vec::new();
    for (a, &alpha) in alphas.iter().enumerate() {
        // A run whose estimators failed (too few samples) is left out.
        let mine: Vec<&Outcome> = runs
            .iter()
            .filter(|r| r.alpha == a && r.delay.len() == links && r.consistency.len() == links)
            .collect();
        if mine.is_empty() {
            continue;
        }
        let truth = &mine[0].truth.links;
        let pick = |f: &dyn Fn(&Outcome, usize) -> f64| -> Vec<Vec<f64>> {
            mine.iter().map(|r| (0..links).map(|i| f(r, i)).collect()).collect()
        };
        let mean = rmse(&pick(&|r, i| r.delay[i].mean), &truth.iter().map(|t| t.mean).collect::<Vec<_>>());
        let var = rmse(&pick(&|r, i| r.delay[i].variance), &truth.iter().map(|t| t.variance).collect::<Vec<_>>());
        let loss_truth: Vec<f64> = truth.iter().map(|t| t.loss).collect();
        let counter = rmse(&pick(&|r, i| r.counter[i].loss), &loss_truth);
        let consistency = rmse(&pick(&|r, i| r.consistency[i].loss), &loss_truth);
        for i in 0..links {
            rows.push(SweepRow {
                alpha,
                link: i + 1,
                delay_mean_rmse: mean.per_link[i],
                delay_var_rmse: var.per_link[i],
                loss_counter_rmse: counter.per_link[i],
                loss_consistency_rmse: consistency.per_link[i],
            });
        }
    }
    Ok(rows)
}
