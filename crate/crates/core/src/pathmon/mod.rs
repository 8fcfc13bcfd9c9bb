//! Per-link delay and loss from successive end-to-end samples on a linear
//! path, with a seeded simulator that produces those samples.

mod estimate;
mod sim;
mod sweep;

pub use estimate::{
    estimate_link_delay, estimate_link_loss, rmse, DelayEstimate, EstimateError, LossEstimate, LossMethod, Rmse,
};
pub use sim::{simulate, ConfigError, GroundTruth, LinkParams, LinkTruth, NodeCounters, PathSampleSet, SimConfig, SimRun};
pub use sweep::{alpha_grid, sweep, SweepRow};

use serde::{Deserialize, Serialize};

/// Per-link estimate published on `path.<path>.<link>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub path: String,
    /// 1-based link index along the path.
    pub link: usize,
    /// Seconds.
    pub delay_mean: f64,
    pub delay_variance: f64,
    pub loss: f64,
    pub ts: f64,
}

impl LinkReport {
    pub fn topic(&self) -> String {
        format!("path.{}.{}", self.path, self.link)
    }
}

/// Pairs delay and loss estimates link by link.
pub fn link_reports(path: &str, delays: &[DelayEstimate], losses: &[LossEstimate], ts: f64) -> Vec<LinkReport> {
    delays
        .iter()
        .zip(losses)
        .map(|(d, l)| {
            debug_assert_eq!(d.link, l.link);
            LinkReport {
                path: path.to_owned(),
                link: d.link,
                delay_mean: d.mean,
                delay_variance: d.variance,
                loss: l.loss,
                ts,
            }
        })
        .collect()
}
