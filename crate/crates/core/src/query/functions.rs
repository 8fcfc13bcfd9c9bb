//! `fn_` escapes from rules into the metrics store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::measure::{Quantity, Unit};

use super::ast::{canonical_function, Value};
use super::metrics::{aggregate, tags, Agg, MetricsError, MetricsStore, QueryOptions};
use super::store::GraphStore;

/// What a function sees besides its arguments.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub store: &'a GraphStore,
    pub metrics: &'a MetricsStore,
    pub options: QueryOptions,
}

/// A function argument: a ground term, or the tuple set of an atom argument
/// projected onto its free variables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum FnInput {
    Value(Value),
    Set(BTreeSet<Vec<Value>>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FnError {
    #[error("expected exactly one {role} leaf, found {}", if candidates.is_empty() { "none".to_owned() } else { candidates.join(", ") })]
    AmbiguousEndpoint { role: &'static str, candidates: Vec<String> },
    #[error("no {metric} data for {tags}")]
    NoMetricData { metric: String, tags: String },
    #[error("no leaf-level link path from {src} to {dst}")]
    NoLeafPath { src: String, dst: String },
    #[error("no compute leaves{}", nf.as_ref().map(|n| format!(" under {n}")).unwrap_or_default())]
    NoComputeLeaves { nf: Option<String> },
    #[error("{function}: {detail}")]
    BadArguments { function: String, detail: String },
    #[error("unknown node {0}")]
    UnknownNode(String),
}

pub type FnImpl = Arc<dyn Fn(&Context<'_>, &[FnInput]) -> Result<Value, FnError> + Send + Sync>;

/// Functions callable from rules, keyed by name.
#[derive(Clone)]
pub struct FnRegistry {
    fns: BTreeMap<String, FnImpl>,
}

impl fmt::Debug for FnRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.fns.keys()).finish()
    }
}

impl Default for FnRegistry {
    /// `fn_e2e_delay`, `fn_h2h_delay`, `fn_average_cpu` and `fn_max_cpu`.
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("fn_e2e_delay", |ctx, args| {
            let [src, dst] = two("fn_e2e_delay", args)?;
            Ok(delay_between(ctx, &endpoint(src, "ingress")?, &endpoint(dst, "egress")?)?.into())
        });
        r.register("fn_h2h_delay", |ctx, args| {
            let [src, dst] = two("fn_h2h_delay", args)?;
            Ok(hop_sum(ctx, &endpoint(src, "ingress")?, &endpoint(dst, "egress")?)?.into())
        });
        r.register("fn_average_cpu", |ctx, args| Ok(cpu(ctx, &one("fn_average_cpu", args)?, Agg::Mean, None)?.into()));
        r.register("fn_max_cpu", |ctx, args| Ok(cpu(ctx, &one("fn_max_cpu", args)?, Agg::Max, None)?.into()));
        r
    }
}

impl FnRegistry {
    pub fn empty() -> Self {
        Self { fns: BTreeMap::new() }
    }

    /// Adds or replaces a function. The name must start with `fn_`.
    pub fn register(
        &mut self,
        name: &str,
        f: impl Fn(&Context<'_>, &[FnInput]) -> Result<Value, FnError> + Send + Sync + 'static,
    ) {
        assert!(name.len() > 3 && name[..3].eq_ignore_ascii_case("fn_"), "function names start with fn_");
        self.fns.insert(canonical_function(name), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<&FnImpl> {
        self.fns.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }
}

fn bad(function: &str, detail: impl Into<String>) -> FnError {
    FnError::BadArguments { function: function.to_owned(), detail: detail.into() }
}

fn two<'a>(function: &str, args: &'a [FnInput]) -> Result<[&'a FnInput; 2], FnError> {
    match args {
        [a, b] => Ok([a, b]),
        _ => Err(bad(function, format!("expected 2 arguments, got {}", args.len()))),
    }
}

/// The node list of a single argument.
fn one(function: &str, args: &[FnInput]) -> Result<Vec<Value>, FnError> {
    match args {
        [FnInput::Value(v)] => Ok(vec![v.clone()]),
        [FnInput::Set(s)] => s
            .iter()
            .map(|t| match t.as_slice() {
                [v] => Ok(v.clone()),
                _ => Err(bad(function, "expected an atom with one free variable")),
            })
            .collect(),
        _ => Err(bad(function, format!("expected 1 argument, got {}", args.len()))),
    }
}

fn show_tuple(t: &[Value]) -> String {
    t.iter().map(Value::to_string).collect::<Vec<_>>().join(",")
}

fn endpoint(input: &FnInput, role: &'static str) -> Result<Value, FnError> {
    match input {
        FnInput::Value(v) => Ok(v.clone()),
        FnInput::Set(s) => match s.iter().next() {
            Some(t) if s.len() == 1 && t.len() == 1 => Ok(t[0].clone()),
            _ => Err(FnError::AmbiguousEndpoint { role, candidates: s.iter().map(|t| show_tuple(t)).collect() }),
        },
    }
}

fn no_data(metric: &str, t: &super::metrics::Tags) -> FnError {
    let shown: Vec<String> = t.iter().map(|(k, v)| format!("{k}={v}")).collect();
    FnError::NoMetricData { metric: metric.to_owned(), tags: format!("{{{}}}", shown.join(", ")) }
}

fn lookup(ctx: &Context<'_>, metric: &str, t: &super::metrics::Tags, opts: &QueryOptions) -> Result<Quantity, FnError> {
    match ctx.metrics.query(metric, t, opts) {
        Ok(Some(q)) => Ok(q),
        Ok(None) | Err(MetricsError::UnknownMetric(_)) => Err(no_data(metric, t)),
        Err(e) => Err(bad(metric, e.to_string())),
    }
}

/// The `delay` metric tagged `{src, dst}`, aggregated per the context options.
pub fn delay_between(ctx: &Context<'_>, src: &Value, dst: &Value) -> Result<Quantity, FnError> {
    let (s, d) = (src.to_string(), dst.to_string());
    lookup(ctx, "delay", &tags([("src", s.as_str()), ("dst", d.as_str())]), &ctx.options)
}

/// Sum of per-hop delays along the shortest leaf-level link path.
fn hop_sum(ctx: &Context<'_>, src: &Value, dst: &Value) -> Result<Quantity, FnError> {
    let path = ctx
        .store
        .link_path(src, dst, true)
        .ok_or_else(|| FnError::NoLeafPath { src: src.to_string(), dst: dst.to_string() })?;
    if path.len() < 2 {
        return Ok(Quantity::new(0.0, Unit::S));
    }
    let hops = path
        .windows(2)
        .map(|w| delay_between(ctx, &w[0], &w[1]).map(|q| (0.0, q)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(&hops, Agg::Sum).expect("at least one hop"))
}

/// Latest `cpu` sample of each node, then `agg` across nodes.
fn cpu(ctx: &Context<'_>, nodes: &[Value], agg: Agg, nf: Option<&str>) -> Result<Quantity, FnError> {
    if nodes.is_empty() {
        return Err(FnError::NoComputeLeaves { nf: nf.map(str::to_owned) });
    }
    let opts = ctx.options.with_agg(Agg::Latest);
    let per_node = nodes
        .iter()
        .map(|n| {
            let n = n.to_string();
            lookup(ctx, "cpu", &tags([("entity", n.as_str())]), &opts).map(|q| (0.0, q))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(&per_node, agg).expect("non-empty"))
}

fn resolve(store: &GraphStore, nf: &str, role: &'static str) -> Result<Value, FnError> {
    if !store.contains_node(nf) {
        return Err(FnError::UnknownNode(nf.to_owned()));
    }
    let fact = if role == "ingress" { "is_ingress" } else { "is_egress" };
    let found: BTreeSet<Vec<Value>> =
        store.leaves_under(nf).into_iter().filter(|l| store.has_role(fact, l)).map(|l| vec![l]).collect();
    endpoint(&FnInput::Set(found), role)
}

fn compute_leaves(store: &GraphStore, nf: &str) -> Result<Vec<Value>, FnError> {
    if !store.contains_node(nf) {
        return Err(FnError::UnknownNode(nf.to_owned()));
    }
    Ok(store.leaves_under(nf).into_iter().filter(|l| store.has_role("is_compute", l)).collect())
}

/// Ingress leaf of `src_nf` and egress leaf of `dst_nf`.
pub fn resolve_endpoints(store: &GraphStore, src_nf: &str, dst_nf: &str) -> Result<(Value, Value), FnError> {
    Ok((resolve(store, src_nf, "ingress")?, resolve(store, dst_nf, "egress")?))
}

/// Delay between the ingress leaf of `src_nf` and the egress leaf of `dst_nf`.
pub fn e2e_delay(ctx: &Context<'_>, src_nf: &str, dst_nf: &str) -> Result<Quantity, FnError> {
    let (s, d) = resolve_endpoints(ctx.store, src_nf, dst_nf)?;
    delay_between(ctx, &s, &d)
}

/// Per-hop delays summed along the leaf path between the same endpoints.
pub fn h2h_delay(ctx: &Context<'_>, src_nf: &str, dst_nf: &str) -> Result<Quantity, FnError> {
    let (s, d) = resolve_endpoints(ctx.store, src_nf, dst_nf)?;
    hop_sum(ctx, &s, &d)
}

/// Mean of the latest CPU sample over the compute leaves of `nf`.
pub fn average_cpu(ctx: &Context<'_>, nf: &str) -> Result<Quantity, FnError> {
    cpu(ctx, &compute_leaves(ctx.store, nf)?, Agg::Mean, Some(nf))
}

pub fn max_cpu(ctx: &Context<'_>, nf: &str) -> Result<Quantity, FnError> {
    cpu(ctx, &compute_leaves(ctx.store, nf)?, Agg::Max, Some(nf))
}
