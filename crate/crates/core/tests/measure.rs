use std::collections::BTreeMap;

use serde_json::json;
use spmon_core::measure::ast::*;
use spmon_core::measure::export::{to_json_value, to_xml};
use spmon_core::measure::*;

const FIREWALL: &str = include_str!("golden/firewall.measure");

fn bindings(ids: &[&str]) -> MfBinding {
    ids.iter().map(|id| (id.to_string(), format!("mf.{id}"))).collect()
}

fn firewall_plan() -> AggregationPlan {
    compile(&parse(FIREWALL).unwrap(), &bindings(&["m1", "m2"])).unwrap()
}

#[test]
fn firewall_program_shape() {
    let p = parse(FIREWALL).unwrap();
    assert_eq!(p.measurements.len(), 2);
    assert_eq!(p.zones.iter().map(|z| z.id.as_str()).collect::<Vec<_>>(), ["z1", "z2", "z3"]);
    let triggers: Vec<_> = p.actions.iter().map(|a| a.trigger.clone()).collect();
    assert_eq!(
        triggers,
        [
            Trigger::Transition { from: "z2".into(), to: "z1".into() },
            Trigger::Transition { from: "z1".into(), to: "z2".into() },
            Trigger::Entry { to: "z3".into() },
        ]
    );
    assert_eq!(p.measurements[0].args[0], Arg::Location { name: "FW-SAP1".into() });
    assert_eq!(p.measurements[0].args[2], Arg::Literal { value: 10.0, unit: Unit::Hz });
    assert_eq!(p.zones[0].threshold, Quantity::new(10.0, Unit::Ms));
    assert_eq!(p.zones[0].pos.line, 7);
}

#[test]
fn firewall_program_matches_golden_json() {
    let got = to_json_value(&parse(FIREWALL).unwrap());
    let want: serde_json::Value = serde_json::from_str(include_str!("golden/firewall.ast.json")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn xml_export_nests_expressions() {
    let xml = to_xml(&parse(FIREWALL).unwrap());
    assert!(xml.starts_with("<program>\n"));
    assert!(xml.contains(r#"<zone id="z1" cmp="&gt;">"#));
    assert!(xml.contains("<sub>\n          <ref id=\"m2\"/>\n          <ref id=\"m1\"/>\n        </sub>"));
    assert!(xml.contains(r#"<entry to="z3"/>"#));
    assert_eq!(xml.matches("<action>").count(), 3);
}

#[test]
fn undeclared_measurement_is_reported() {
    let err = parse("zones { z1 = mean(50, m9) > 10ms; }").unwrap_err();
    assert!(matches!(err, MeasureError::UnknownReference { ref id, line: 1, col: 23 } if id == "m9"), "{err:?}");
}

#[test]
fn frequency_threshold_is_a_unit_mismatch() {
    let src = "measurements { m1 = delay(a, b, 10hz); } zones { z = mean(50, m1) > 10hz; }";
    assert!(matches!(parse(src), Err(MeasureError::UnitMismatch { .. })));
    let src = "measurements { m1 = delay(a, b); } zones { z = mean(5, m1) > 1%; }";
    assert!(matches!(parse(src), Err(MeasureError::UnitMismatch { .. })));
    let src = "measurements { l = loss(a, b); d = delay(a, b); } zones { z = sum(5, l + d) > 1%; }";
    assert!(matches!(parse(src), Err(MeasureError::UnitMismatch { .. })));
}

#[test]
fn other_diagnostics() {
    let dup = "measurements { m1 = delay(a, b); m1 = delay(c, d); }";
    assert!(matches!(parse(dup), Err(MeasureError::DuplicateId { ref id, line: 1, col: 34 }) if id == "m1"));
    let bad_zone = "measurements { m = delay(a, b); } zones { z = mean(5, m) > 1ms; } actions { -> q = Notify(C, []); }";
    assert!(matches!(parse(bad_zone), Err(MeasureError::UnknownReference { ref id, .. }) if id == "q"));
    let zero = "measurements { m = delay(a, b); } zones { z = mean(0, m) > 1ms; }";
    assert!(matches!(parse(zero), Err(MeasureError::Syntax { line: 1, col: 52, .. })));
    let missing = "measurements {\n  m = delay(a, b)\n}";
    assert!(matches!(parse(missing), Err(MeasureError::Syntax { line: 3, col: 1, ref expected }) if expected == "`;`"));
    assert!(matches!(parse("zones { z = avg(5, m) > 1ms; }"), Err(MeasureError::Syntax { .. })));
    assert!(matches!(parse("actions {} zones {}"), Err(MeasureError::Syntax { .. })));
    assert!(matches!(parse("zones { z = mean(5, m) > 1parsec; }"), Err(MeasureError::Syntax { .. })));
}

#[test]
fn comments_and_layout_do_not_matter() {
    let compact = "measurements{m1=delay(FW-SAP1,FW-SAP2,10hz);m2=delay(SAP1,SAP2,10hz);}\
        zones{z1=mean(50,m1)>10ms;z2=mean(50,m1)<=10ms;z3=mean(50,m2-m1)>5ms;}\
        actions{z2->z1=Notify(Controller,[\"Alert\",\"m1\",m1]);z1->z2=Notify(Controller,[\"OK\",\"m1\"]);\
        ->z3=Notify(Controller,[\"Alert\",\"m2-m1\",m2-m1]);}";
    assert_eq!(parse(compact).unwrap(), parse(FIREWALL).unwrap());
}

#[test]
fn pretty_print_round_trips_the_firewall_program() {
    let p = parse(FIREWALL).unwrap();
    let text = p.to_string();
    assert_eq!(parse(&text).unwrap(), p);
    assert!(text.contains("    z3 = mean(50, m2 - m1) > 5ms;\n"));
    assert!(text.contains("    -> z3 = Notify(Controller, [\"Alert\", \"m2-m1\", m2 - m1]);\n"));
}

#[test]
fn right_nested_differences_keep_parentheses() {
    let src = "measurements { a = delay(x, y); b = delay(x, y); c = delay(x, y); } \
               zones { z = mean(3, a - (b - c)) > 1ms; w = mean(3, a - b - c) > 1ms; }";
    let p = parse(src).unwrap();
    assert_ne!(p.zones[0].aggregate.expr, p.zones[1].aggregate.expr);
    assert_eq!(parse(&p.to_string()).unwrap(), p);
    assert!(p.to_string().contains("a - (b - c)"));
}

#[test]
fn firewall_split_into_three_uses_max() {
    let p = parse(FIREWALL).unwrap();
    let rules = BTreeMap::from([("m1".to_string(), DecompositionRule::Parallel { k: 3, combiner: Combiner::Max })]);
    let r = rewrite_for_decomposition(&p, &rules).unwrap();
    let ids: Vec<_> = r.measurements.iter().map(|m| m.id.as_str()).collect();
    assert_eq!(ids, ["m1a", "m1b", "m1c", "m2"]);
    assert_eq!(r.measurements[1].args[0], Arg::Location { name: "FW-SAP1.b".into() });
    assert_eq!(r.measurements[1].args[2], Arg::Literal { value: 10.0, unit: Unit::Hz });
    let max3 = MExpr::Combine {
        op: Combiner::Max,
        args: vec![MExpr::reference("m1a"), MExpr::reference("m1b"), MExpr::reference("m1c")],
    };
    assert_eq!(r.zones[0].aggregate.expr, max3);
    assert_eq!(
        r.zones[2].aggregate.expr,
        MExpr::Sub { lhs: Box::new(MExpr::reference("m2")), rhs: Box::new(max3.clone()) }
    );
    assert!(r.zones[0].to_string().contains("mean(50, max(m1a, m1b, m1c))"));
    validate(&r).unwrap();
    assert_eq!(parse(&r.to_string()).unwrap(), r);
}

#[test]
fn parallel_loss_is_summed() {
    let src = "measurements { l = loss(in, out); } zones { bad = mean(20, l) > 1%; } \
               actions { -> bad = Notify(Ops, [\"loss\", l]); }";
    let p = parse(src).unwrap();
    let rules = BTreeMap::from([("l".to_string(), "parallel(2, sum)".parse().unwrap())]);
    let r = rewrite_for_decomposition(&p, &rules).unwrap();

    let sum = MExpr::Combine { op: Combiner::Sum, args: vec![MExpr::reference("la"), MExpr::reference("lb")] };
    let mut expected = p.clone();
    expected.measurements = vec![
        ast::MeasurementDecl {
            id: "la".into(),
            function: "loss".into(),
            args: vec![Arg::Location { name: "in.a".into() }, Arg::Location { name: "out.a".into() }],
            pos: Default::default(),
        },
        ast::MeasurementDecl {
            id: "lb".into(),
            function: "loss".into(),
            args: vec![Arg::Location { name: "in.b".into() }, Arg::Location { name: "out.b".into() }],
            pos: Default::default(),
        },
    ];
    expected.zones[0].aggregate.expr = sum.clone();
    expected.actions[0].action = Action::Notify {
        dest: "Ops".into(),
        payload: vec![PayloadItem::Text { value: "loss".into() }, PayloadItem::Expr { expr: sum }],
    };
    assert_eq!(r, expected);
}

#[test]
fn serial_rule_is_identity_and_bad_rules_fail() {
    let p = parse(FIREWALL).unwrap();
    let serial = BTreeMap::from([("m1".to_string(), DecompositionRule::Serial)]);
    assert_eq!(rewrite_for_decomposition(&p, &serial).unwrap(), p);
    let ghost = BTreeMap::from([("m7".to_string(), DecompositionRule::Serial)]);
    assert_eq!(rewrite_for_decomposition(&p, &ghost), Err(RewriteError::UnknownMeasurement("m7".into())));
    assert!(matches!("parallel(3, mean)".parse::<DecompositionRule>(), Err(RewriteError::UnsupportedCombiner(_))));
}

#[test]
fn capacities_follow_the_largest_window() {
    let plan = firewall_plan();
    assert_eq!(plan.capacity("m1"), Some(50));
    assert_eq!(plan.capacity("m2"), Some(50));
    let src = "measurements { m = delay(a, b); u = delay(a, b); } \
               zones { s = mean(10, m) > 1ms; l = mean(50, m) > 2ms; }";
    let plan = compile(&parse(src).unwrap(), &bindings(&["m", "u"])).unwrap();
    assert_eq!(plan.capacity("m"), Some(50));
    assert_eq!(plan.capacity("u"), Some(1));
}

#[test]
fn unbound_measurement_is_refused() {
    let err = compile(&parse(FIREWALL).unwrap(), &bindings(&["m1"])).unwrap_err();
    assert_eq!(err, CompileError::UnboundMeasurement("m2".into()));
}

#[test]
fn empty_zone_section_never_fires() {
    let p = parse("measurements { m = delay(a, b); } zones { } actions { }").unwrap();
    let mut plan = compile(&p, &bindings(&["m"])).unwrap();
    for i in 0..100 {
        let out = plan.ingest("mf.m", f64::from(i), Unit::Ms, f64::from(i)).unwrap();
        assert!(out.notifications.is_empty());
        assert_eq!(out.active, ActiveZone::Default);
    }
}

#[test]
fn unknown_mf_id_is_counted_and_dropped() {
    let mut plan = firewall_plan();
    assert_eq!(plan.ingest("mf.nope", 1.0, Unit::Ms, 0.0), Err(IngestError::UnknownMfId("mf.nope".into())));
    assert!(matches!(plan.ingest("mf.m1", 1.0, Unit::Percent, 0.0), Err(IngestError::UnitMismatch { .. })));
    assert_eq!(plan.dropped(), 2);
    assert_eq!(plan.samples("m1"), Some(vec![]));
}

#[test]
fn no_true_predicate_means_default_zone() {
    let src = "measurements { m = delay(a, b); } zones { hi = mean(3, m) > 100ms; lo = mean(3, m) < 1ms; } \
               actions { -> hi = Notify(C, [\"hi\"]); -> lo = Notify(C, [\"lo\"]); }";
    let mut plan = compile(&parse(src).unwrap(), &bindings(&["m"])).unwrap();
    for i in 0..20 {
        let out = plan.ingest("mf.m", 10.0, Unit::Ms, f64::from(i)).unwrap();
        assert_eq!(out.active, ActiveZone::Default);
        assert!(out.notifications.is_empty());
    }
}

#[test]
fn monitor_results_decode_from_bus_json() {
    let r: MonitorResult = serde_json::from_str(r#"{"mf_id":"mf.m1","value":12.5,"unit":"ms","ts":3.5}"#).unwrap();
    let mut plan = firewall_plan();
    let out = plan.ingest_result(&r).unwrap();
    assert_eq!(out.active, ActiveZone::Named("z1".into()));
    assert!(out.warmup);
    assert_eq!(plan.samples("m1"), Some(vec![0.0125]));
}

#[test]
fn transitions_fire_before_entries_in_declaration_order() {
    let src = "measurements { m = delay(a, b); } zones { lo = max(1, m) < 5ms; hi = max(1, m) >= 5ms; } \
               actions { -> hi = Notify(A, [\"entry\"]); lo -> hi = Notify(B, [\"t1\"]); \
               lo -> hi = Notify(C, [\"t2\", m]); }";
    let mut plan = compile(&parse(src).unwrap(), &bindings(&["m"])).unwrap();
    plan.ingest("mf.m", 1.0, Unit::Ms, 0.0).unwrap();
    let out = plan.ingest("mf.m", 9.0, Unit::Ms, 1.0).unwrap();
    let dests: Vec<_> = out.notifications.iter().map(|n| n.dest.as_str()).collect();
    assert_eq!(dests, ["B", "C", "A"]);
    assert_eq!(out.notifications[1].payload_json(), r#"["t2",0.009]"#);
    assert_eq!(out.notifications[1].topic(), "measure.notify.C");
    assert_eq!(out.changed, Some((ActiveZone::Named("lo".into()), ActiveZone::Named("hi".into()))));
}

#[test]
fn combined_replicas_use_per_replica_window_aggregates() {
    let src = "measurements { a = delay(x, y); b = delay(x, y); } zones { z = mean(2, max(a, b)) > 100ms; }";
    let mut plan = compile(&parse(src).unwrap(), &bindings(&["a", "b"])).unwrap();
    for v in [1.0, 3.0] {
        plan.ingest("mf.a", v, Unit::Ms, 0.0).unwrap();
    }
    plan.ingest("mf.b", 10.0, Unit::Ms, 0.0).unwrap();
    let p = plan.program().clone();
    let w = plan.eval_aggregate(AggKind::Mean, 2, &p.zones[0].aggregate.expr).unwrap();
    // max(mean(1, 3), mean(10)) rather than a pointwise max.
    assert!((w.value - 0.010).abs() < 1e-15);
    assert!(w.warmup);
}

/// Straightforward re-statement of the firewall program's semantics over the
/// full sample history, used as the trace oracle.
struct FirewallOracle {
    m1: Vec<f64>,
    m2: Vec<f64>,
    zone: &'static str,
}

impl FirewallOracle {
    fn mean_tail(xs: &[f64]) -> Option<f64> {
        let t = &xs[xs.len().saturating_sub(50)..];
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    }

    fn step(&mut self, which: u8, v: f64) -> Vec<serde_json::Value> {
        if which == 1 { self.m1.push(v) } else { self.m2.push(v) }
        let m1 = Self::mean_tail(&self.m1);
        let n = self.m1.len().min(self.m2.len()).min(50);
        let diff = (n > 0).then(|| {
            let (a, b) = (&self.m2[self.m2.len() - n..], &self.m1[self.m1.len() - n..]);
            a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / n as f64
        });
        let next = if m1.is_some_and(|m| m > 0.010) {
            "z1"
        } else if m1.is_some_and(|m| m <= 0.010) {
            "z2"
        } else if diff.is_some_and(|d| d > 0.005) {
            "z3"
        } else {
            "default"
        };
        let prev = std::mem::replace(&mut self.zone, next);
        let mut out = Vec::new();
        match (prev, next) {
            ("z2", "z1") => out.push(json!(["Alert", "m1", m1.unwrap()])),
            ("z1", "z2") => out.push(json!(["OK", "m1"])),
            _ => {}
        }
        if prev != next && next == "z3" {
            out.push(json!(["Alert", "m2-m1", diff.unwrap()]));
        }
        out
    }
}

/// 120 samples: 60 rounds of (m2, m1). m1 sits at 7 ms, climbs to 12 ms and
/// falls back to 6 ms; m2 stays 20 ms above it.
fn scripted_trace() -> Vec<(u8, f64)> {
    let mut t = Vec::new();
    for round in 0..60 {
        let m1 = match round {
            0..=14 => 7.0,
            15..=39 => 12.0,
            _ => 6.0,
        };
        t.push((2, m1 + 20.0));
        t.push((1, m1));
    }
    t
}

#[test]
fn scripted_trace_matches_oracle() {
    let mut plan = firewall_plan();
    let mut oracle = FirewallOracle { m1: vec![], m2: vec![], zone: "default" };
    let mut fired = Vec::new();
    for (i, &(which, ms)) in scripted_trace().iter().enumerate() {
        let out = plan.ingest(if which == 1 { "mf.m1" } else { "mf.m2" }, ms, Unit::Ms, i as f64 / 10.0).unwrap();
        let got: Vec<serde_json::Value> = out.notifications.iter().map(|n| serde_json::Value::Array(n.payload.clone())).collect();
        let want = oracle.step(which, ms / 1000.0);
        assert_eq!(got.len(), want.len(), "sample {i}");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g[0], w[0], "sample {i}");
            if let (Some(a), Some(b)) = (g.get(2).and_then(|v| v.as_f64()), w.get(2).and_then(|v| v.as_f64())) {
                assert!((a - b).abs() < 1e-12, "sample {i}: {a} vs {b}");
            }
        }
        assert_eq!(out.active.to_string(), oracle.zone, "sample {i}");
        fired.extend(out.notifications.into_iter().map(|n| (i, n.payload_json())));
    }
    // Hand simulation. After 15 samples of 7 ms, k samples of 12 ms give a
    // mean of (105 + 12k) / (15 + k), above 10 ms first at k = 23: round 37,
    // sample 75, mean 381/38 ms. From 405/40 ms, j samples of 6 ms give
    // (405 + 6j) / (40 + j), at most 10 ms first at j = 2: round 41, sample 83.
    // z3 is shadowed throughout: m1 always has samples, and z1/z2 cover
    // every mean.
    assert_eq!(fired.len(), 2, "{fired:?}");
    assert_eq!(fired[0].0, 75);
    let alert: serde_json::Value = serde_json::from_str(&fired[0].1).unwrap();
    assert_eq!(alert[0], "Alert");
    assert!((alert[2].as_f64().unwrap() - 0.381 / 38.0).abs() < 1e-15);
    assert_eq!(fired[1], (83, r#"["OK","m1"]"#.to_owned()));
}
