use std::collections::BTreeSet;

use spmon_core::measure::{Quantity, Unit};
use spmon_core::pathmon::LinkReport;
use spmon_core::query::ingest::{link_points, points_from_message, rate_points};
use spmon_core::query::*;
use spmon_core::ratemon::{LognormalParams, RateReport};

fn syms(names: &[&str]) -> BTreeSet<Value> {
    names.iter().map(|n| Value::sym(*n)).collect()
}

fn graph() -> GraphStore {
    GraphStore::load(EXAMPLE_GRAPH).unwrap()
}

fn ms(v: f64) -> Quantity {
    Quantity::new(v, Unit::Ms)
}

fn delay(m: &mut MetricsStore, src: &str, dst: &str, ts: f64, q: Quantity) {
    m.put(MetricPoint::new("delay", tags([("src", src), ("dst", dst)]), ts, q)).unwrap();
}

fn cpu(m: &mut MetricsStore, entity: &str, ts: f64, pct: f64) {
    m.put(MetricPoint::new("cpu", tags([("entity", entity)]), ts, Quantity::new(pct, Unit::Percent))).unwrap();
}

fn column(store: &GraphStore, rules: &[Rule], query: &str, var: &str) -> BTreeSet<Value> {
    evaluate(store, rules, &parse_atom(query).unwrap()).unwrap().column(var)
}

const REFERENCE_DELAY_RULES: &str = "
# descent
R1: child(X,Y) <= sub(X,Z), child(Z,Y)
R2: child(X,Y) <= sub(X,Y)
R3: all_Leaf(X,Y) <= child(X,Y), is_Leaf(Y)
R4: leaf_src(X,Y) <= all_Leaf(X,Y), is_source(Y)
R5: leaf_dst(X,Y) <= all_Leaf(X,Y), is_dst (Y)
R6: e2e_delay(S,D,P) <= Link(S,D), P == fn_e2e_delay(leaf_src(S,Y), leaf_dst(D,Z))
R7: h2h_delay(S,D,H) <= Link(S,D), H == fn_h2h_delay(all_Leaf(X,Y))
";

#[test]
fn reference_rules_parse() {
    let rules = parse_rules(REFERENCE_DELAY_RULES).unwrap();
    assert_eq!(rules.len(), 7);
    assert_eq!(rules[0].to_string(), "R1: child(X, Y) <= sub(X, Z), child(Z, Y)");
    assert_eq!(rules[0].id.as_deref(), Some("R1"));
    assert!(matches!(&rules[5].body[1], Literal::Assign { var, call } if var == "P" && call.name == "fn_e2e_delay"));
    let Literal::Assign { call, .. } = &rules[5].body[1] else { unreachable!() };
    assert!(matches!(&call.args[0], FnArg::Atom(a) if a.pred == "leaf_src"));

    let cpu = parse_rules("R5: average_cpu(X) <= fn_average_cpu(all_compute(nf, Y))").unwrap();
    assert!(cpu[0].has_fn());
    assert!(matches!(&cpu[0].body[0], Literal::Call(c) if c.name == "fn_average_cpu"));
    assert_eq!(cpu[0].call_vars(), vec!["X"]);

    // Printing and re-parsing is the identity on the bundled library.
    let lib = library();
    let printed: String = lib.iter().map(|r| format!("{r}\n")).collect();
    assert_eq!(parse_rules(&printed).unwrap(), lib);
}

#[test]
fn terms_follow_the_case_convention() {
    let a = parse_atom("p(X, nf1, 'NF1', 4ms, _)").unwrap();
    assert_eq!(
        a.args,
        vec![
            Term::var("X"),
            Term::sym("nf1"),
            Term::sym("NF1"),
            Term::Const(Value::num(4.0, Unit::Ms)),
            Term::var("_1"),
        ]
    );
    assert_eq!(a.to_string(), "p(X, nf1, 'NF1', 4ms, _1)");
}

#[test]
fn unsafe_and_malformed_rules_are_refused() {
    assert_eq!(
        parse_rules("bad(X) <= link(a,b)").unwrap_err(),
        QueryError::UnsafeRule { rule: "bad(X) <= link(a, b)".into(), var: "X".into() }
    );
    assert!(matches!(parse_rules("R1: p(X, Y) <= q(X)"), Err(QueryError::UnsafeRule { var, .. }) if var == "Y"));
    assert!(matches!(parse_rules("p(X)"), Err(QueryError::UnsafeRule { .. })));
    assert!(matches!(parse_rules("p(X, V) <= q(X), V == fn_max_cpu(W)"), Err(QueryError::UnsafeRule { var, .. }) if var == "W"));
    assert_eq!(
        parse_rules("child(X,Y) <= sub(X,Y),\n  child(Y").unwrap_err(),
        QueryError::Syntax { line: 2, col: 10, expected: "`,` or `)`".into() }
    );
    assert!(matches!(parse_rules("fn_x(X) <= q(X)"), Err(QueryError::Syntax { line: 1, col: 1, .. })));
    assert!(matches!(parse_rules("Q1: p(a)"), Err(QueryError::Syntax { .. })));
    assert!(matches!(parse_rules("p(X) <= q(X), V == fn_a(fn_b(X))"), Err(QueryError::Syntax { .. })));
}

#[test]
fn loading_graphs() {
    let one = GraphStore::load("sub(a,b)").unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.kvp().collect::<Vec<_>>(), vec![vec![Value::sym("sub"), Value::sym("a"), Value::sym("b")]]);
    assert_eq!(
        GraphStore::load("sub(a,b)\nsub(b,a)").unwrap_err(),
        QueryError::CyclicSub { cycle: vec!["a".into(), "b".into(), "a".into()] }
    );
    assert!(matches!(GraphStore::load("sub(a,a)"), Err(QueryError::CyclicSub { .. })));
    assert_eq!(GraphStore::load("sub(a,b)\nF2: sub(a,b)\nnode(a)").unwrap().len(), 2);
    assert_eq!(GraphStore::load("sub(x, a, b)").unwrap(), GraphStore::load("sub(x,a) sub(x,b)").unwrap());
    assert!(matches!(GraphStore::load("link(a)"), Err(QueryError::ArityMismatch { .. })));
    assert!(matches!(GraphStore::load("p(X)"), Err(QueryError::UnsafeRule { .. })));
    assert!(matches!(GraphStore::load("p(a) <= q(a)"), Err(QueryError::Syntax { .. })));

    let g = graph();
    assert!(g.kvp().any(|t| t == vec![Value::sym("sub"), Value::sym("nf1"), Value::sym("vnf1-1")]));
    assert_eq!(GraphStore::load(&g.to_facts()).unwrap(), g);
    // Aliases and capitalisation fold onto one fact.
    let a = GraphStore::load("Link(a,b) is_source(a) is_dst(b)").unwrap();
    assert!(a.relation("link").is_some() && a.has_role("is_ingress", &Value::sym("a")) && a.has_role("is_egress", &Value::sym("b")));
}

#[test]
fn child_is_the_transitive_closure() {
    let rules = library();
    assert_eq!(
        evaluate(&GraphStore::load("sub(a,b) sub(b,c)").unwrap(), &rules, &parse_atom("child(X,Y)").unwrap()).unwrap().rows,
        [["a", "b"], ["b", "c"], ["a", "c"]].iter().map(|r| r.iter().map(|s| Value::sym(*s)).collect()).collect()
    );
    assert_eq!(
        evaluate(&GraphStore::load("sub(a,b)").unwrap(), &rules, &parse_atom("child(X,Y)").unwrap()).unwrap().rows,
        BTreeSet::from([vec![Value::sym("a"), Value::sym("b")]])
    );
}

#[test]
fn example_graph_leaves() {
    let (g, rules) = (graph(), library());
    let nf1_children = ["vnf1-1", "vnf1-3", "vnf1-2", "vm1", "vm2", "vm3", "vm7", "vm8"];
    let nf2_children = ["vnf2-1", "vnf2-2", "vnf2-3", "vm4", "vm5", "vm6", "vm9", "vm10"];
    assert_eq!(column(&g, &rules, "child(nf1, Y)", "Y"), syms(&nf1_children));
    assert_eq!(column(&g, &rules, "child(nf2, Y)", "Y"), syms(&nf2_children));
    let leaves = syms(&["vm1", "vm2", "vm3", "vm7", "vm8"]);
    assert_eq!(column(&g, &rules, "all_Leaf(nf1, Y)", "Y"), leaves);
    assert_eq!(column(&g, &rules, "all_compute(nf1, Y)", "Y"), leaves);
    assert_eq!(g.leaves_under("nf1"), leaves);
    assert_eq!(column(&g, &rules, "leaf_src(nf1, Y)", "Y"), syms(&["vm7"]));
    assert_eq!(column(&g, &rules, "leaf_dst(nf2, Y)", "Y"), syms(&["vm10"]));
    assert_eq!(resolve_endpoints(&g, "nf1", "nf2").unwrap(), (Value::sym("vm7"), Value::sym("vm10")));
}

#[test]
fn is_leaf_builtin() {
    let g = graph();
    assert_eq!(g.is_leaf("vm7"), Ok(true));
    assert_eq!(g.is_leaf("nf1"), Ok(false));
    assert_eq!(g.is_leaf("nowhere"), Err(QueryError::UnknownNode("nowhere".into())));
    let lone = GraphStore::load("node(z) sub(a,b)").unwrap();
    assert_eq!(lone.is_leaf("z"), Ok(true));
    let rules = parse_rules("leaf(X) <= is_Leaf(X)").unwrap();
    assert_eq!(column(&lone, &rules, "leaf(X)", "X"), syms(&["b", "z"]));
    assert_eq!(parse_rules("is_leaf(a)").map(|r| evaluate(&lone, &r, &parse_atom("is_leaf(X)").unwrap())).unwrap(), Err(QueryError::BuiltinFact("is_leaf".into())));
}

#[test]
fn e2e_delay_between_functions() {
    let (g, rules) = (graph(), library());
    let mut m = MetricsStore::new();
    delay(&mut m, "vm7", "vm10", 10.0, ms(4.0));
    let engine = Engine::new(&g).with_metrics(&m);
    let want = Value::num(4.0, Unit::Ms);
    let rows = engine.query(&rules, &parse_atom("e2e_delay(nf1, nf2, P)").unwrap()).unwrap();
    assert_eq!(rows.column("P"), BTreeSet::from([want.clone()]));
    let cmd = engine.command(&rules, "e2e_delay nf1 nf2").unwrap();
    assert_eq!((cmd.vars.clone(), cmd.column("V1")), (vec!["V1".to_string()], BTreeSet::from([want])));
    assert_eq!(e2e_delay(&engine.context(), "nf1", "nf2").unwrap(), ms(4.0));

    // Mean over the window.
    delay(&mut m, "vm7", "vm10", 20.0, ms(6.0));
    assert_eq!(e2e_delay(&Engine::new(&g).with_metrics(&m).context(), "nf1", "nf2").unwrap(), ms(5.0));
}

#[test]
fn e2e_delay_errors() {
    let (g, rules) = (graph(), library());
    let empty = MetricsStore::new();
    let q = parse_atom("e2e_delay(nf1, nf2, P)").unwrap();
    let err = Engine::new(&g).with_metrics(&empty).query(&rules, &q).unwrap_err();
    assert!(matches!(&err, QueryError::Fn { rule, error: FnError::NoMetricData { metric, .. } } if rule == "R6" && metric == "delay"), "{err}");
    assert!(matches!(
        e2e_delay(&Engine::new(&g).context(), "nf1", "nf2"),
        Err(FnError::NoMetricData { .. })
    ));

    let twice = g.with_fact("is_ingress", vec![Value::sym("vm1")]).unwrap();
    let mut m = MetricsStore::new();
    delay(&mut m, "vm7", "vm10", 0.0, ms(4.0));
    let err = Engine::new(&twice).with_metrics(&m).query(&rules, &q).unwrap_err();
    assert!(
        matches!(&err, QueryError::Fn { error: FnError::AmbiguousEndpoint { role: "ingress", candidates }, .. } if candidates == &["vm1", "vm7"]),
        "{err}"
    );
    assert!(matches!(
        e2e_delay(&Engine::new(&twice).with_metrics(&m).context(), "nf1", "nf2"),
        Err(FnError::AmbiguousEndpoint { .. })
    ));
    assert_eq!(e2e_delay(&Engine::new(&g).context(), "nf9", "nf2"), Err(FnError::UnknownNode("nf9".into())));
}

const TWO_HOP: &str = "
link(fa, fb)
sub(fa, a1, a2)
sub(fb, b1)
link(a1, a2)
link(a2, b1)
is_ingress(a1)
is_egress(b1)
";

#[test]
fn h2h_delay_sums_hops() {
    let g = GraphStore::load(TWO_HOP).unwrap();
    let mut m = MetricsStore::new();
    delay(&mut m, "a1", "a2", 0.0, ms(2.0));
    delay(&mut m, "a2", "b1", 0.0, ms(3.0));
    let engine = Engine::new(&g).with_metrics(&m);
    assert_eq!(h2h_delay(&engine.context(), "fa", "fb").unwrap(), ms(5.0));
    let rows = engine.command(&library(), "h2h_delay fa fb").unwrap();
    assert_eq!(rows.column("V1"), BTreeSet::from([Value::num(5.0, Unit::Ms)]));

    // One segment: the hop sum is the end-to-end value.
    let single = GraphStore::load("link(fa,fb) sub(fa,a1) sub(fb,b1) link(a1,b1) is_ingress(a1) is_egress(b1)").unwrap();
    let mut m = MetricsStore::new();
    delay(&mut m, "a1", "b1", 0.0, ms(7.5));
    let ctx = Engine::new(&single).with_metrics(&m).context();
    assert_eq!(h2h_delay(&ctx, "fa", "fb").unwrap(), e2e_delay(&ctx, "fa", "fb").unwrap());

    let broken = GraphStore::load(&TWO_HOP.replace("link(a2, b1)", "")).unwrap();
    let ctx = Engine::new(&broken).with_metrics(&m).context();
    assert_eq!(h2h_delay(&ctx, "fa", "fb"), Err(FnError::NoLeafPath { src: "a1".into(), dst: "b1".into() }));
}

#[test]
fn h2h_delay_on_example_graph() {
    let g = graph();
    let path = ["vm7", "vm1", "vm3", "vm8", "vm4", "vm5", "vm9", "vm10"];
    assert_eq!(
        g.link_path(&Value::sym("vm7"), &Value::sym("vm10"), true).unwrap(),
        path.iter().map(|s| Value::sym(*s)).collect::<Vec<_>>()
    );
    let mut m = MetricsStore::new();
    for (i, w) in path.windows(2).enumerate() {
        delay(&mut m, w[0], w[1], 0.0, ms(i as f64 + 1.0));
    }
    assert_eq!(h2h_delay(&Engine::new(&g).with_metrics(&m).context(), "nf1", "nf2").unwrap(), ms(28.0));
    // The service-level link is no shortcut between leaves.
    assert!(g.link_path(&Value::sym("nf1"), &Value::sym("nf2"), true).is_none());
}

#[test]
fn cpu_over_compute_leaves() {
    let (g, rules) = (graph(), library());
    let mut m = MetricsStore::new();
    for (vm, pct) in [("vm1", 10.0), ("vm2", 20.0), ("vm3", 30.0), ("vm7", 40.0), ("vm8", 50.0)] {
        cpu(&mut m, vm, 0.0, 99.0);
        cpu(&mut m, vm, 1.0, pct);
    }
    let engine = Engine::new(&g).with_metrics(&m);
    let pct = |v| Quantity::new(v, Unit::Percent);
    assert_eq!(average_cpu(&engine.context(), "nf1").unwrap(), pct(30.0));
    assert_eq!(max_cpu(&engine.context(), "nf1").unwrap(), pct(50.0));
    assert_eq!(engine.command(&rules, "average_cpu nf1").unwrap().column("V1"), BTreeSet::from([Value::num(30.0, Unit::Percent)]));
    assert_eq!(engine.command(&rules, "max_cpu nf1").unwrap().column("V1"), BTreeSet::from([Value::num(50.0, Unit::Percent)]));
    // The CPU rule exactly as the library writes it binds its result through a bare call.
    let bare = parse_rules(&format!("{}\nR11: nf1_cpu(C) <= fn_average_cpu(all_compute(nf1, Y))", LIBRARY)).unwrap();
    assert_eq!(engine.query(&bare, &parse_atom("nf1_cpu(C)").unwrap()).unwrap().column("C"), BTreeSet::from([Value::num(30.0, Unit::Percent)]));

    assert_eq!(average_cpu(&engine.context(), "vnf1-2").unwrap(), max_cpu(&engine.context(), "vnf1-2").unwrap());
    let net = GraphStore::load("sub(nf, sw1, sw2)").unwrap();
    assert_eq!(average_cpu(&Engine::new(&net).context(), "nf"), Err(FnError::NoComputeLeaves { nf: Some("nf".into()) }));
    assert!(matches!(average_cpu(&Engine::new(&g).context(), "nf2"), Err(FnError::NoMetricData { .. })));
}

#[test]
fn evaluation_errors() {
    let g = graph();
    let q = parse_atom("p(X)").unwrap();
    assert_eq!(
        evaluate(&g, &parse_rules("p(X) <= missing(X)").unwrap(), &q),
        Err(QueryError::UnknownPredicate("missing".into()))
    );
    assert_eq!(evaluate(&g, &[], &q), Err(QueryError::UnknownPredicate("p".into())));
    assert_eq!(
        evaluate(&g, &parse_rules("p(X, V) <= node(X), V == fn_nothing(X)").unwrap(), &q),
        Err(QueryError::UnknownFunction("fn_nothing".into()))
    );
    let recursive = "p(X, V) <= node(X), V == fn_max_cpu(q(X, Y))\nq(X, Y) <= p(X, Y)";
    assert_eq!(
        evaluate(&g, &parse_rules(recursive).unwrap(), &parse_atom("p(X, V)").unwrap()),
        Err(QueryError::NonStratifiedFnCall { rule: "p(X, V) <= node(X), V == fn_max_cpu(q(X, Y))".into() })
    );
    assert!(matches!(evaluate(&g, &parse_rules("p(X) <= sub(X)").unwrap(), &q), Err(QueryError::ArityMismatch { .. })));
    assert!(matches!(evaluate(&g, &library(), &parse_atom("child(X)").unwrap()), Err(QueryError::ArityMismatch { .. })));
}

#[test]
fn naive_and_semi_naive_agree_on_the_example() {
    let (g, rules) = (graph(), library());
    let mut m = MetricsStore::new();
    delay(&mut m, "vm7", "vm10", 0.0, ms(4.0));
    let e = Engine::new(&g).with_metrics(&m);
    assert_eq!(e.run_with(&rules, Iteration::Naive).unwrap(), e.run_with(&rules, Iteration::SemiNaive).unwrap());
}

#[test]
fn user_functions_and_facts_in_rules() {
    let g = GraphStore::load("node(a) node(b)").unwrap();
    let mut fns = FnRegistry::default();
    fns.register("fn_name_len", |_, args| match args {
        [FnInput::Value(Value::Sym(s))] => Ok(Value::num(s.len() as f64, Unit::None)),
        _ => Err(FnError::BadArguments { function: "fn_name_len".into(), detail: "one symbol".into() }),
    });
    let rules = parse_rules("F1: extra(abc)\nlen(X, N) <= extra(X), N == fn_name_len(X)").unwrap();
    let rows = Engine::new(&g).with_functions(fns).query(&rules, &parse_atom("len(abc, N)").unwrap()).unwrap();
    assert_eq!(rows.column("N"), BTreeSet::from([Value::num(3.0, Unit::None)]));
}

#[test]
fn metrics_store_basics() {
    let mut m = MetricsStore::new();
    let t = tags([("entity", "x")]);
    for (ts, v) in [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)] {
        m.put(MetricPoint::new("load", t.clone(), ts, Quantity::new(v, Unit::None))).unwrap();
    }
    assert_eq!(m.query("load", &t, &QueryOptions::all(Agg::Mean)).unwrap().unwrap().value, 2.0);
    m.put(MetricPoint::new("load", t.clone(), 100.0, Quantity::new(9.0, Unit::None))).unwrap();
    // The default window is the last 60 s before the newest point.
    assert_eq!(m.query("load", &t, &QueryOptions::default()).unwrap().unwrap().value, 9.0);
    assert_eq!(m.query("load", &t, &QueryOptions { end: Some(3.0), ..QueryOptions::default() }).unwrap().unwrap().value, 2.0);
    assert_eq!(m.query("load", &tags([("entity", "y")]), &QueryOptions::default()).unwrap(), None);
    assert!(matches!(m.query("nope", &t, &QueryOptions::default()), Err(MetricsError::UnknownMetric(_))));
    assert_eq!("max".parse::<Agg>().unwrap(), Agg::Max);
    assert!(matches!(m.put(MetricPoint::new("load", t, f64::NAN, Quantity::new(1.0, Unit::None))), Err(MetricsError::NonFinite)));
}

#[test]
fn metrics_persist_as_ndjson() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.ndjson");
    {
        let mut m = MetricsStore::open(&path).unwrap();
        delay(&mut m, "vm7", "vm10", 1.0, ms(4.0));
        delay(&mut m, "vm7", "vm10", 1.0, ms(5.0));
        cpu(&mut m, "vm1", 2.0, 10.0);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().next().unwrap().starts_with(r#"{"metric":"delay","tags":{"dst":"vm10","src":"vm7"},"ts":1.0,"value":4.0,"unit":"ms"}"#));
    let back = MetricsStore::load(&path).unwrap();
    assert_eq!(back.len(), 2);
    let t = tags([("src", "vm7"), ("dst", "vm10")]);
    assert_eq!(back.query("delay", &t, &QueryOptions::default()).unwrap(), Some(ms(5.0)));
    let mut reopened = MetricsStore::open(&path).unwrap();
    cpu(&mut reopened, "vm2", 3.0, 20.0);
    assert_eq!(MetricsStore::load(&path).unwrap().len(), 3);
    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(matches!(MetricsStore::load(&path), Err(MetricsError::Record { line: 1, .. })));
}

#[test]
fn published_reports_read_back_exactly() {
    let p = LognormalParams::from_moments(2.5e7, 4e13).unwrap();
    let r = RateReport::new("link1", &p, 0.0123, 42.0);
    let mut m = MetricsStore::new();
    for pt in points_from_message(&r.topic(), serde_json::to_string(&r).unwrap().as_bytes()).unwrap() {
        m.put(pt).unwrap();
    }
    let latest = QueryOptions::default().with_agg(Agg::Latest);
    let t = tags([("entity", "link1")]);
    let read = |metric: &str| m.query(metric, &t, &latest).unwrap().unwrap().value;
    assert_eq!((read("rate_mu"), read("rate_sigma2"), read("rate_mean"), read("rate_variance"), read("overload_risk")), (r.mu, r.sigma2, r.m, r.v, r.risk));
    assert_eq!(rate_points(&r).len(), 5);

    let l = LinkReport { path: "p1".into(), link: 3, delay_mean: 0.0021, delay_variance: 1e-6, loss: 0.04, ts: 7.0 };
    assert_eq!(l.topic(), "path.p1.3");
    for pt in points_from_message(&l.topic(), serde_json::to_string(&l).unwrap().as_bytes()).unwrap() {
        m.put(pt).unwrap();
    }
    let t = tags([("path", "p1"), ("link", "3")]);
    assert_eq!(m.query("link_delay_mean", &t, &latest).unwrap(), Some(Quantity::new(0.0021, Unit::S)));
    assert_eq!(m.query("link_loss", &t, &latest).unwrap().unwrap().value, 0.04);
    assert_eq!(link_points(&l).len(), 3);
    assert!(points_from_message("other.x", b"{}").is_err());
    assert!(points_from_message("rate.x", b"{}").is_err());
}
