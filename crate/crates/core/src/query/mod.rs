//! Recursive queries over service-graph facts (`sub`, `link`, `node` and
//! the role facts `is_ingress`, `is_egress`, `is_compute`), with `fn_` calls
//! into an embedded metrics store.
//!
//! Rules are positive Datalog: no negation, no function symbols in heads.
//! Leaf-ness is the built-in relation `is_leaf` (also spelled `is_Leaf`).
//! Relational rules run to a semi-naive fixpoint stratum by stratum; a rule
//! with a function call is placed above everything it reads and fires once
//! its inputs are complete.

mod ast;
mod eval;
mod functions;
pub mod ingest;
mod metrics;
mod parser;
mod store;

pub use ast::{canonical_function, canonical_predicate, Atom, FnArg, FnCall, Literal, Rule, Term, Value};
pub use eval::{answers, evaluate, Answers, Engine, Evaluation, Failure, Relations, Iteration};
pub use functions::{
    average_cpu, delay_between, e2e_delay, h2h_delay, max_cpu, resolve_endpoints, Context, FnError, FnImpl, FnInput,
    FnRegistry,
};
pub use metrics::{aggregate, tags, Agg, MetricPoint, MetricsError, MetricsStore, QueryOptions, SharedMetrics, Tags};
pub use parser::{parse_atom, parse_command, parse_rules};
pub use store::{GraphStore, Relation, SCHEMA};

/// The bundled rule library: descent, leaves, endpoints, delay and CPU queries.
pub const LIBRARY: &str = include_str!("../../data/library.dl");

/// A two-function service graph decomposed down to ten VMs.
pub const EXAMPLE_GRAPH: &str = include_str!("../../data/service-graph.facts");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QueryError {
    #[error("{line}:{col}: expected {expected}")]
    Syntax { line: usize, col: usize, expected: String },
    #[error("unsafe rule {rule}: variable {var} is not bound by the body")]
    UnsafeRule { rule: String, var: String },
    #[error("sub relation has a cycle: {}", cycle.join(" -> "))]
    CyclicSub { cycle: Vec<String> },
    #[error("unknown predicate {0}")]
    UnknownPredicate(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("{pred} takes {want} arguments, got {got}")]
    ArityMismatch { pred: String, want: usize, got: usize },
    #[error("rule {rule} calls a function on a relation that depends on its own head")]
    NonStratifiedFnCall { rule: String },
    #[error("{0} is built in and cannot be asserted or derived")]
    BuiltinFact(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("rule {rule}: {error}")]
    Fn { rule: String, error: FnError },
}

/// The bundled library, parsed.
pub fn library() -> Vec<Rule> {
    parse_rules(LIBRARY).expect("the bundled library parses")
}
