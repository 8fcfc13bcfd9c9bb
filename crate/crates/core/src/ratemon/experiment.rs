//! Seeded synthetic traffic with known overload probability, used to measure
//! the detector's hit and false-alarm rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{fit, normal_quantile, normal_sf, MomentWindow, RiskDetector, ZoneEvent};

/// Lognormal per-interval rate distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficProfile {
    pub mu: f64,
    pub sigma: f64,
}

impl TrafficProfile {
    /// The profile whose rate exceeds `capacity` with probability `p`.
    pub fn with_exceedance(capacity: f64, sigma: f64, p: f64) -> Self {
        Self { mu: capacity.ln() - sigma * normal_quantile(1.0 - p), sigma }
    }

    pub fn exceedance(&self, capacity: f64) -> f64 {
        normal_sf((capacity.ln() - self.mu) / self.sigma)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        LogNormal::new(self.mu, self.sigma).expect("sigma is finite and positive").sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Link capacity in bytes per second.
    pub capacity: f64,
    pub dt: f64,
    /// Intervals folded into one estimate before the window tumbles.
    pub report_every: u32,
    pub reports_per_episode: u32,
    pub threshold: f64,
    pub k: u32,
    pub sigma: f64,
    /// True exceedance range of overload episodes.
    pub overload: (f64, f64),
    /// True exceedance range of calm episodes.
    pub calm: (f64, f64),
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            capacity: 1.25e8,
            dt: 0.3,
            report_every: 10,
            reports_per_episode: 10,
            threshold: RiskDetector::DEFAULT_THRESHOLD,
            k: RiskDetector::DEFAULT_K,
            sigma: 0.5,
            overload: (0.0501, 0.25),
            calm: (1e-4, 1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub true_exceedance: f64,
    pub risks: Vec<f64>,
    /// Some report in the episode moved the detector into the congested state.
    pub flagged: bool,
}

/// Runs one episode from a calm detector and fresh window.
pub fn run_episode(cfg: &ExperimentConfig, profile: TrafficProfile, rng: &mut impl Rng) -> Episode {
    let mut window = MomentWindow::new(cfg.dt);
    let mut detector = RiskDetector::new(cfg.capacity, cfg.threshold, cfg.k);
    let mut risks = Vec::with_capacity(cfg.reports_per_episode as usize);
    let mut flagged = false;
    for _ in 0..cfg.reports_per_episode {
        for _ in 0..cfg.report_every {
            window.observe(profile.sample(rng) * cfg.dt);
        }
        let params = fit(&window).expect("report_every ≥ 2 and rates are positive");
        window.reset();
        let (risk, event) = detector.tick_params(&params);
        risks.push(risk);
        flagged |= event == Some(ZoneEvent::EnterCongested);
    }
    Episode { true_exceedance: profile.exceedance(cfg.capacity), risks, flagged }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub episodes: usize,
    pub detected: usize,
    pub false_alarms: usize,
}

impl DetectionReport {
    pub fn detection_rate(&self) -> f64 {
        self.detected as f64 / self.episodes as f64
    }

    pub fn false_alarm_rate(&self) -> f64 {
        self.false_alarms as f64 / self.episodes as f64
    }
}

/// `episodes` overload episodes and as many calm ones. Episode `i` draws
/// from its own stream seeded by `seed + i`.
pub fn detection_experiment(cfg: &ExperimentConfig, seed: u64, episodes: usize) -> DetectionReport {
    let mut report = DetectionReport { episodes, detected: 0, false_alarms: 0 };
    for i in 0..episodes as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
        let hot = TrafficProfile::with_exceedance(cfg.capacity, cfg.sigma, rng.random_range(cfg.overload.0..cfg.overload.1));
        report.detected += usize::from(run_episode(cfg, hot, &mut rng).flagged);
        let calm = TrafficProfile::with_exceedance(cfg.capacity, cfg.sigma, rng.random_range(cfg.calm.0..cfg.calm.1));
        report.false_alarms += usize::from(run_episode(cfg, calm, &mut rng).flagged);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_hits_requested_exceedance() {
        let p = TrafficProfile::with_exceedance(1.25e8, 0.5, 0.06);
        assert!((p.exceedance(1.25e8) - 0.06).abs() < 1e-9);
    }
}
