use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use spmon_core::ratemon::experiment::{detection_experiment, ExperimentConfig};
use spmon_core::ratemon::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn window_of(samples: impl IntoIterator<Item = f64>) -> MomentWindow {
    let mut w = MomentWindow::new(0.3);
    samples.into_iter().for_each(|x| w.observe_rate(x));
    w
}

#[test]
fn seeded_lognormal_parameters_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let d = LogNormal::new(1.0, 0.5).unwrap();
    let p = fit(&window_of((0..10_000).map(|_| d.sample(&mut rng)))).unwrap();
    assert!((p.mu - 1.0).abs() < 0.05, "mu {}", p.mu);
    assert!((p.sigma() - 0.5).abs() < 0.05, "sigma {}", p.sigma());
}

#[test]
fn risk_agrees_with_reference_normal() {
    let n = Normal::standard();
    let p = LognormalParams::from_moments(3.0e7, 4.0e14).unwrap();
    for c in [1e6, 1e7, 2e7, 3e7, 5e7, 1e8, 1e9] {
        let want = 1.0 - n.cdf((f64::ln(c) - p.mu) / p.sigma());
        assert!((overload_risk(&p, c) - want).abs() < 1.5e-7, "capacity {c}");
    }
    for z in [-6.0, -2.5, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0, 6.0] {
        assert!((normal_cdf(z) - n.cdf(z)).abs() < 1.5e-7, "z {z}");
    }
}

#[test]
fn degenerate_risk_at_equality() {
    let p = LognormalParams::from_moments(5.0, 0.0).unwrap();
    assert_eq!(overload_risk(&p, 5.0), 0.5);
    assert_eq!(overload_risk(&p, 10.0), 0.0);
}

#[test]
fn detection_experiment_meets_rates() {
    let r = detection_experiment(&ExperimentConfig::default(), 1, 200);
    assert!(r.detection_rate() >= 0.98, "{r:?}");
    assert!(r.false_alarm_rate() < 0.05, "{r:?}");
}

#[test]
fn sparse_reading_keeps_the_99th_percentile() {
    let capacity = 1.25e9;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let d = LogNormal::new(f64::ln(4e8), 0.4).unwrap();
    let trace: Vec<f64> = (0..20_000).map(|_| d.sample(&mut rng)).collect();
    let full = fit(&window_of(trace.iter().copied())).unwrap();
    let sparse = fit(&window_of(trace.iter().copied().step_by(10))).unwrap();
    let gap = (full.quantile(0.99) - sparse.quantile(0.99)).abs();
    assert!(gap < 0.1 * capacity, "p99 gap {gap}");
}

#[test]
fn report_serializes_with_moment_names() {
    let p = LognormalParams::from_moments(2.0, 1.0).unwrap();
    let r = RateReport::new("link1", &p, 0.25, 12.5);
    let v = serde_json::to_value(&r).unwrap();
    assert_eq!(v["entity"], "link1");
    assert_eq!(v["M"], 2.0);
    assert_eq!(v["V"], 1.0);
    assert_eq!(r.topic(), "rate.link1");
}

proptest! {
    #[test]
    fn fit_inverts_the_moment_equations(m in 1e-3f64..1e10, cv in 0.0f64..5.0) {
        let v = (cv * m).powi(2);
        let p = LognormalParams::from_moments(m, v).unwrap();
        prop_assert!((p.implied_mean() - m).abs() <= 1e-9 * m);
        prop_assert!((p.implied_variance() - v).abs() <= 1e-9 * v.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn fitted_window_inverts(xs in prop::collection::vec(1.0f64..1e6, 2..200)) {
        let w = window_of(xs);
        let p = fit(&w).unwrap();
        prop_assert!((p.implied_mean() - w.s1()).abs() <= 1e-9 * w.s1());
        prop_assert!((p.implied_variance() - p.v).abs() <= 1e-9 * w.s2());
    }

    #[test]
    fn risk_is_monotone(mu in -5.0f64..20.0, s2 in 1e-4f64..4.0, c1 in 1e-3f64..1e9, c2 in 1e-3f64..1e9, dmu in 0.0f64..3.0) {
        let p = LognormalParams { mu, sigma2: s2, m: 0.0, v: 0.0 };
        let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
        prop_assert!(overload_risk(&p, hi) <= overload_risk(&p, lo));
        let q = LognormalParams { mu: mu + dmu, ..p };
        prop_assert!(overload_risk(&q, c1) >= overload_risk(&p, c1));
    }

    #[test]
    fn detector_flips_only_after_k_in_a_row(risks in prop::collection::vec(prop_oneof![Just(0.0), Just(0.005), Just(0.02), Just(0.5)], 0..200), k in 1u32..6) {
        let mut d = RiskDetector::new(1.0, 0.01, k);
        let mut run = 0u32;
        let mut state = RiskState::Calm;
        for r in risks {
            let beyond = if state == RiskState::Calm { r > 0.01 } else { r <= 0.01 };
            run = if beyond { run + 1 } else { 0 };
            let ev = d.tick(r);
            if run == k {
                run = 0;
                state = if state == RiskState::Calm { RiskState::Congested } else { RiskState::Calm };
                prop_assert!(ev.is_some());
            } else {
                prop_assert!(ev.is_none());
            }
            prop_assert_eq!(d.state(), state);
        }
    }
}
