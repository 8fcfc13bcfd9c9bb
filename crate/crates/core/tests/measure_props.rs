use std::collections::BTreeMap;

use proptest::prelude::*;
use spmon_core::measure::ast::*;
use spmon_core::measure::*;

const MEASUREMENTS: [&str; 3] = ["ma", "mb", "mc"];

fn mexpr() -> impl Strategy<Value = MExpr> {
    let leaf = prop::sample::select(&MEASUREMENTS[..]).prop_map(MExpr::reference);
    leaf.prop_recursive(3, 12, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(l, r)| MExpr::Add { lhs: Box::new(l), rhs: Box::new(r) }),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| MExpr::Sub { lhs: Box::new(l), rhs: Box::new(r) }),
            (prop::sample::select(vec![Combiner::Max, Combiner::Sum, Combiner::Min]), prop::collection::vec(inner, 1..4))
                .prop_map(|(op, args)| MExpr::Combine { op, args }),
        ]
    })
}

fn quantity() -> impl Strategy<Value = Quantity> {
    (0u32..100_000, 0u32..3, prop::sample::select(vec![Unit::S, Unit::Ms, Unit::Us]))
        .prop_map(|(v, shift, unit)| Quantity::new(f64::from(v) / 10f64.powi(shift as i32), unit))
}

fn cmp() -> impl Strategy<Value = Cmp> {
    prop::sample::select(vec![Cmp::Gt, Cmp::Ge, Cmp::Lt, Cmp::Le, Cmp::Eq])
}

fn zone(i: usize) -> impl Strategy<Value = ZoneDecl> {
    (prop::sample::select(AggKind::ALL.to_vec()), 1u32..80, mexpr(), cmp(), quantity()).prop_map(
        move |(kind, window, expr, cmp, threshold)| ZoneDecl {
            id: format!("z{i}"),
            aggregate: Aggregate { kind, window, expr },
            cmp,
            threshold,
            pos: Pos::default(),
        },
    )
}

fn text() -> impl Strategy<Value = String> {
    "[ -~\\t\\n]{0,12}"
}

fn program() -> impl Strategy<Value = Program> {
    (1usize..5).prop_flat_map(|nz| {
        let zones: Vec<_> = (0..nz).map(zone).collect();
        let action = (
            prop::option::of(0..nz),
            0..nz,
            "[A-Z][a-z]{0,6}",
            prop::collection::vec(prop_oneof![text().prop_map(|value| PayloadItem::Text { value }), mexpr().prop_map(|expr| PayloadItem::Expr { expr })], 0..4),
        )
            .prop_map(|(from, to, dest, payload)| ActionDecl {
                trigger: match from {
                    Some(f) => Trigger::Transition { from: format!("z{f}"), to: format!("z{to}") },
                    None => Trigger::Entry { to: format!("z{to}") },
                },
                action: Action::Notify { dest, payload },
                pos: Pos::default(),
            });
        let measurements = prop::collection::vec("[A-Za-z][A-Za-z0-9_.-]{0,8}", 3).prop_map(|locs| {
            MEASUREMENTS
                .iter()
                .zip(locs)
                .map(|(id, loc)| ast::MeasurementDecl {
                    id: id.to_string(),
                    function: "delay".into(),
                    args: vec![Arg::Location { name: loc }, Arg::Literal { value: 10.0, unit: Unit::Hz }],
                    pos: Pos::default(),
                })
                .collect::<Vec<_>>()
        });
        (measurements, zones, prop::collection::vec(action, 0..6))
            .prop_map(|(measurements, zones, actions)| Program { measurements, zones, actions })
    })
}

fn feed() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec((0usize..3, 0u32..40), 1..150).prop_map(|v| v.into_iter().map(|(m, x)| (m, f64::from(x))).collect())
}

fn bindings() -> MfBinding {
    MEASUREMENTS.iter().map(|id| (id.to_string(), format!("mf.{id}"))).collect()
}

fn trace(plan: &mut AggregationPlan, samples: &[(usize, f64)]) -> Vec<(ActiveZone, Vec<String>)> {
    samples
        .iter()
        .enumerate()
        .map(|(i, &(m, v))| {
            let out = plan.ingest(&format!("mf.{}", MEASUREMENTS[m]), v, Unit::Ms, i as f64).unwrap();
            (out.active, out.notifications.iter().map(|n| format!("{}:{}", n.dest, n.payload_json())).collect())
        })
        .collect()
}

/// Truth value of every zone predicate, computed directly from the plan's
/// buffers.
fn truths(plan: &AggregationPlan) -> Vec<bool> {
    plan.program()
        .zones
        .iter()
        .map(|z| {
            let a = &z.aggregate;
            plan.eval_aggregate(a.kind, a.window as usize, &a.expr)
                .is_some_and(|w| z.cmp.holds(w.value, z.threshold.canonical()))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn print_then_parse_is_a_fixpoint(p in program()) {
        validate(&p).unwrap();
        let text = p.to_string();
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn exactly_the_first_true_zone_is_active(p in program(), samples in feed(), seed in any::<u64>()) {
        let mut plan = compile(&p, &bindings()).unwrap();
        let mut shuffled = p.clone();
        let n = shuffled.zones.len();
        for i in (1..n).rev() {
            shuffled.zones.swap(i, (seed as usize ^ i.wrapping_mul(0x9e37)) % (i + 1));
        }
        let mut other = compile(&shuffled, &bindings()).unwrap();
        for (i, &(m, v)) in samples.iter().enumerate() {
            let mf = format!("mf.{}", MEASUREMENTS[m]);
            let a = plan.ingest(&mf, v, Unit::Ms, i as f64).unwrap().active;
            let b = other.ingest(&mf, v, Unit::Ms, i as f64).unwrap().active;
            let t = truths(&plan);
            let want = t.iter().position(|&x| x).map_or(ActiveZone::Default, |z| ActiveZone::Named(p.zones[z].id.clone()));
            prop_assert_eq!(&a, &want);
            if t.iter().filter(|&&x| x).count() < 2 {
                prop_assert_eq!(&a, &b);
            }
        }
    }

    #[test]
    fn steady_state_fires_nothing(p in program(), samples in feed(), level in 0u32..40) {
        let mut plan = compile(&p, &bindings()).unwrap();
        trace(&mut plan, &samples);
        let settle: Vec<(usize, f64)> = (0..3 * 80).map(|i| (i % 3, f64::from(level))).collect();
        trace(&mut plan, &settle);
        for (i, &(m, v)) in settle.iter().enumerate() {
            let out = plan.ingest(&format!("mf.{}", MEASUREMENTS[m]), v, Unit::Ms, i as f64).unwrap();
            prop_assert!(out.changed.is_none());
            prop_assert!(out.notifications.is_empty());
        }
    }

    #[test]
    fn serial_rewrite_preserves_traces(p in program(), samples in feed()) {
        let rules: BTreeMap<String, DecompositionRule> =
            MEASUREMENTS.iter().map(|m| (m.to_string(), DecompositionRule::Serial)).collect();
        let r = rewrite_for_decomposition(&p, &rules).unwrap();
        let mut a = compile(&p, &bindings()).unwrap();
        let mut b = compile(&r, &bindings()).unwrap();
        prop_assert_eq!(trace(&mut a, &samples), trace(&mut b, &samples));
    }

    #[test]
    fn window_aggregate_matches_direct_arithmetic(xs in prop::collection::vec(-1e3f64..1e3, 1..60), n in 1usize..80) {
        let tail = &xs[xs.len().saturating_sub(n)..];
        let mean = window_aggregate(AggKind::Mean, n, &xs).unwrap();
        prop_assert!((mean.value - tail.iter().sum::<f64>() / tail.len() as f64).abs() < 1e-9);
        prop_assert_eq!(mean.warmup, xs.len() < n);
        prop_assert_eq!(window_aggregate(AggKind::Max, n, &xs).unwrap().value, tail.iter().copied().fold(f64::MIN, f64::max));
        prop_assert_eq!(window_aggregate(AggKind::Min, n, &xs).unwrap().value, tail.iter().copied().fold(f64::MAX, f64::min));
    }
}
