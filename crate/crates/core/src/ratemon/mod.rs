//! Node-local rate modelling: two moment counters per entity, a lognormal fit
//! by the method of moments and the resulting overload risk.

pub mod experiment;
mod normal;

use serde::{Deserialize, Serialize};

pub use normal::{erf, erfc, normal_cdf, normal_quantile, normal_sf};

/// Running first and second moments of the per-interval rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentWindow {
    n: u64,
    sum: f64,
    sum_sq: f64,
    dt: f64,
}

impl MomentWindow {
    /// A fresh window for intervals of `dt` seconds.
    pub fn new(dt: f64) -> Self {
        assert!(dt > 0.0 && dt.is_finite(), "sampling interval must be positive, got {dt}");
        Self { n: 0, sum: 0.0, sum_sq: 0.0, dt }
    }

    /// Folds in the bytes counted over one interval.
    pub fn observe(&mut self, bytes: f64) {
        self.observe_rate(bytes / self.dt);
    }

    pub fn observe_rate(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    /// Tumbling reset after a report.
    pub fn reset(&mut self) {
        *self = Self::new(self.dt);
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Σx/n, or 0 for an empty window.
    pub fn s1(&self) -> f64 {
        if self.n == 0 { 0.0 } else { self.sum / self.n as f64 }
    }

    /// Σx²/n, or 0 for an empty window.
    pub fn s2(&self) -> f64 {
        if self.n == 0 { 0.0 } else { self.sum_sq / self.n as f64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalParams {
    pub mu: f64,
    pub sigma2: f64,
    /// Sample mean.
    #[serde(rename = "M")]
    pub m: f64,
    /// Sample variance, clamped at zero.
    #[serde(rename = "V")]
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FitError {
    #[error("at least two samples are needed, have {0}")]
    InsufficientSamples(u64),
    #[error("the sample mean is not positive")]
    NonPositiveMean,
}

impl LognormalParams {
    pub fn from_moments(m: f64, v: f64) -> Result<Self, FitError> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also refuses NaN
        if !(m > 0.0) {
            return Err(FitError::NonPositiveMean);
        }
        let v = v.max(0.0);
        let sigma2 = (v / (m * m)).ln_1p();
        Ok(Self { mu: m.ln() - 0.5 * sigma2, sigma2, m, v })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Mean implied by (μ, σ²).
    pub fn implied_mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma2).exp()
    }

    /// Variance implied by (μ, σ²).
    pub fn implied_variance(&self) -> f64 {
        self.sigma2.exp_m1() * (2.0 * self.mu + self.sigma2).exp()
    }

    pub fn quantile(&self, p: f64) -> f64 {
        (self.mu + self.sigma() * normal_quantile(p)).exp()
    }
}

pub fn fit(w: &MomentWindow) -> Result<LognormalParams, FitError> {
    if w.n < 2 {
        return Err(FitError::InsufficientSamples(w.n));
    }
    let m = w.s1();
    LognormalParams::from_moments(m, w.s2() - m * m)
}

/// Probability that the fitted rate exceeds `capacity`.
pub fn overload_risk(p: &LognormalParams, capacity: f64) -> f64 {
    assert!(capacity > 0.0, "capacity must be positive");
    if p.sigma2 == 0.0 {
        return match capacity.partial_cmp(&p.m) {
            Some(std::cmp::Ordering::Greater) => 0.0,
            Some(std::cmp::Ordering::Less) => 1.0,
            _ => 0.5,
        };
    }
    normal_sf((capacity.ln() - p.mu) / p.sigma())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskState {
    Calm,
    Congested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZoneEvent {
    EnterCongested,
    EnterCalm,
}

/// Threshold detector with k-consecutive hysteresis.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskDetector {
    pub capacity: f64,
    pub threshold: f64,
    pub k: u32,
    state: RiskState,
    consecutive: u32,
}

impl RiskDetector {
    pub const DEFAULT_THRESHOLD: f64 = 0.01;
    pub const DEFAULT_K: u32 = 3;

    pub fn new(capacity: f64, threshold: f64, k: u32) -> Self {
        assert!(k >= 1, "hysteresis depth must be at least 1");
        Self { capacity, threshold, k, state: RiskState::Calm, consecutive: 0 }
    }

    pub fn state(&self) -> RiskState {
        self.state
    }

    /// Feeds one risk estimate. An event is returned on the k-th consecutive
    /// estimate on the other side of the threshold.
    pub fn tick(&mut self, risk: f64) -> Option<ZoneEvent> {
        let beyond = match self.state {
            RiskState::Calm => risk > self.threshold,
            RiskState::Congested => risk <= self.threshold,
        };
        if !beyond {
            self.consecutive = 0;
            return None;
        }
        self.consecutive += 1;
        if self.consecutive < self.k {
            return None;
        }
        self.consecutive = 0;
        Some(match self.state {
            RiskState::Calm => {
                self.state = RiskState::Congested;
                ZoneEvent::EnterCongested
            }
            RiskState::Congested => {
                self.state = RiskState::Calm;
                ZoneEvent::EnterCalm
            }
        })
    }

    /// Risk of the fitted window against this detector's capacity, then a tick.
    pub fn tick_params(&mut self, p: &LognormalParams) -> (f64, Option<ZoneEvent>) {
        let risk = overload_risk(p, self.capacity);
        (risk, self.tick(risk))
    }
}

/// Periodic report sent to the aggregator and published on `rate.<entity>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub entity: String,
    pub mu: f64,
    pub sigma2: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub risk: f64,
    pub ts: f64,
}

impl RateReport {
    pub fn new(entity: impl Into<String>, p: &LognormalParams, risk: f64, ts: f64) -> Self {
        Self { entity: entity.into(), mu: p.mu, sigma2: p.sigma2, m: p.m, v: p.v, risk, ts }
    }

    pub fn topic(&self) -> String {
        format!("rate.{}", self.entity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_observation() {
        let mut w = MomentWindow::new(1.0);
        w.observe(1000.0);
        assert_eq!((w.n(), w.s1(), w.s2()), (1, 1000.0, 1e6));
        assert_eq!(fit(&w), Err(FitError::InsufficientSamples(1)));
    }

    #[test]
    fn three_rates() {
        let mut w = MomentWindow::new(0.5);
        for kb in [1.0, 2.0, 3.0] {
            w.observe(kb * 500.0);
        }
        assert_eq!(w.s1(), 2000.0);
        assert!((w.s2() - 14.0 / 3.0 * 1e6).abs() < 1e-6);
    }

    #[test]
    fn constant_stream_has_no_variance() {
        let mut w = MomentWindow::new(0.3);
        for _ in 0..100 {
            w.observe_rate(7.5e6);
        }
        let p = fit(&w).unwrap();
        assert!((w.s1() - 7.5e6).abs() < 1e-6 && p.v == 0.0 && p.sigma2 == 0.0);
        assert!((p.mu - 7.5e6f64.ln()).abs() < 1e-12);
        assert_eq!(overload_risk(&p, 1.5e7), 0.0);
        assert_eq!(overload_risk(&p, 1e6), 1.0);
    }

    #[test]
    fn textbook_moments() {
        let e = std::f64::consts::E;
        let p = LognormalParams::from_moments(e, e * e * (e - 1.0)).unwrap();
        assert!((p.sigma2 - 1.0).abs() < 1e-12);
        assert!((p.mu - 0.5).abs() < 1e-12);
        assert_eq!(LognormalParams::from_moments(0.0, 1.0), Err(FitError::NonPositiveMean));
    }

    #[test]
    fn risk_at_median_and_two_sigma() {
        let p = LognormalParams { mu: 0.5, sigma2: 1.0, m: 0.0, v: 0.0 };
        assert!((overload_risk(&p, 0.5f64.exp()) - 0.5).abs() < 1e-7);
        assert!((overload_risk(&p, 2.5f64.exp()) - 0.022_750_131_948_179_2).abs() < 1.5e-7);
    }

    #[test]
    fn hysteresis() {
        let mut d = RiskDetector::new(1.0, 0.01, 3);
        assert_eq!([0.02, 0.02, 0.02].map(|r| d.tick(r)), [None, None, Some(ZoneEvent::EnterCongested)]);
        assert_eq!([0.0, 0.02, 0.0, 0.0, 0.0].map(|r| d.tick(r)), [None, None, None, None, Some(ZoneEvent::EnterCalm)]);
        let mut d = RiskDetector::new(1.0, 0.01, 3);
        assert!((0..100).all(|i| d.tick(if i % 2 == 0 { 0.02 } else { 0.005 }).is_none()));
        assert!((0..100).all(|_| d.tick(0.0).is_none()));
        // The threshold itself counts as calm.
        assert!((0..10).all(|_| d.tick(0.01).is_none()));
    }
}
