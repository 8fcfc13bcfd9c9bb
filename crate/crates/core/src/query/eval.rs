use std::collections::{BTreeMap, BTreeSet};

use super::ast::*;
use super::functions::{Context, FnError, FnInput, FnRegistry};
use super::metrics::{MetricsStore, QueryOptions, EMPTY_METRICS};
use super::parser::parse_command;
use super::store::{scan_first, GraphStore, Relation, SCHEMA};
use super::QueryError;

pub type Relations = BTreeMap<String, Relation>;

/// A function call that failed for one body binding. The binding derives
/// nothing; the failure is kept so a query that matches it can report why.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub rule: String,
    pub pred: String,
    /// Head arguments known when the call failed.
    pub head: Vec<Option<Value>>,
    pub error: FnError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub relations: Relations,
    pub failures: Vec<Failure>,
}

impl Evaluation {
    pub fn relation(&self, pred: &str) -> Option<&Relation> {
        self.relations.get(&canonical_predicate(pred))
    }
}

/// Bindings of a query's variables, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Answers {
    pub vars: Vec<String>,
    pub rows: BTreeSet<Vec<Value>>,
}

impl Answers {
    /// The values of one variable across all rows.
    pub fn column(&self, var: &str) -> BTreeSet<Value> {
        let Some(i) = self.vars.iter().position(|v| v == var) else {
            return BTreeSet::new();
        };
        self.rows.iter().map(|r| r[i].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Iteration {
    SemiNaive,
    /// Re-derives everything each round; the reference for the semi-naive strategy.
    Naive,
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Var(usize),
    Const(Value),
}

#[derive(Debug, Clone)]
struct CAtom {
    pred: String,
    args: Vec<Slot>,
}

#[derive(Debug, Clone)]
enum CArg {
    Slot(Slot),
    Atom(CAtom),
}

#[derive(Debug, Clone)]
struct CCall {
    name: String,
    args: Vec<CArg>,
    out: usize,
}

#[derive(Debug, Clone)]
struct CRule {
    label: String,
    head: CAtom,
    body: Vec<CAtom>,
    calls: Vec<CCall>,
    nvars: usize,
    /// Slots bound by the body that the head or the calls read.
    keep: Vec<usize>,
    stratum: usize,
    /// Join order with no delta atom, then with each body atom as the delta.
    plans: Vec<Vec<usize>>,
}

type Binding = Vec<Option<Value>>;

impl CAtom {
    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.args.iter().filter_map(|s| match s {
            Slot::Var(i) => Some(*i),
            Slot::Const(_) => None,
        })
    }

    fn ground(&self, b: &Binding) -> Vec<Value> {
        self.args.iter().map(|s| resolve(s, b).expect("head slots are bound").clone()).collect()
    }
}

fn resolve<'a>(s: &'a Slot, b: &'a Binding) -> Option<&'a Value> {
    match s {
        Slot::Const(v) => Some(v),
        Slot::Var(i) => b[*i].as_ref(),
    }
}

/// Calls `k` once per tuple of `rel` that unifies with `atom` under `b`,
/// with the new bindings in place.
fn match_atom(atom: &CAtom, rel: Option<&Relation>, b: &mut Binding, k: &mut dyn FnMut(&mut Binding)) {
    let Some(rel) = rel else { return };
    let mut try_tuple = |t: &Vec<Value>, b: &mut Binding| {
        if t.len() != atom.args.len() {
            return;
        }
        let mut fresh: Vec<usize> = Vec::new();
        let mut ok = true;
        for (s, v) in atom.args.iter().zip(t) {
            match s {
                Slot::Const(c) => ok = c == v,
                Slot::Var(i) => match &b[*i] {
                    Some(x) => ok = x == v,
                    None => {
                        b[*i] = Some(v.clone());
                        fresh.push(*i);
                    }
                },
            }
            if !ok {
                break;
            }
        }
        if ok {
            k(b);
        }
        for i in fresh {
            b[i] = None;
        }
    };
    let first = atom.args.first().and_then(|s| resolve(s, b)).cloned();
    match first {
        Some(v) => {
            for t in scan_first(Some(rel), &v) {
                try_tuple(t, b);
            }
        }
        None => {
            for t in rel {
                try_tuple(t, b);
            }
        }
    }
}

fn join(atoms: &[(&CAtom, Option<&Relation>)], b: &mut Binding, k: &mut dyn FnMut(&mut Binding)) {
    match atoms.split_first() {
        None => k(b),
        Some(((a, rel), rest)) => match_atom(a, *rel, b, &mut |b| join(rest, b, k)),
    }
}

/// Greedy join order: after the optional delta atom, the atom with the most
/// bound arguments first.
fn plan(body: &[CAtom], first: Option<usize>) -> Vec<usize> {
    let mut bound: BTreeSet<usize> = BTreeSet::new();
    let mut left: Vec<usize> = (0..body.len()).collect();
    let mut order = Vec::with_capacity(body.len());
    let mut take = |i: usize, left: &mut Vec<usize>, bound: &mut BTreeSet<usize>| {
        left.retain(|&j| j != i);
        bound.extend(body[i].slots());
        order.push(i);
    };
    if let Some(f) = first {
        take(f, &mut left, &mut bound);
    }
    while !left.is_empty() {
        let score = |i: usize| {
            let a = &body[i];
            let is_bound = |s: &Slot| match s {
                Slot::Const(_) => true,
                Slot::Var(v) => bound.contains(v),
            };
            (a.args.first().is_some_and(is_bound), a.args.iter().filter(|s| is_bound(s)).count())
        };
        let best = left.iter().copied().fold(None, |acc: Option<usize>, i| match acc {
            Some(j) if score(j) >= score(i) => Some(j),
            _ => Some(i),
        });
        take(best.expect("non-empty"), &mut left, &mut bound);
    }
    order
}

struct Compiler<'a> {
    arity: BTreeMap<String, usize>,
    known: BTreeSet<String>,
    functions: &'a FnRegistry,
}

impl Compiler<'_> {
    fn check_arity(&mut self, pred: &str, n: usize) -> Result<(), QueryError> {
        match self.arity.get(pred) {
            Some(&want) if want != n => Err(QueryError::ArityMismatch { pred: pred.to_owned(), want, got: n }),
            Some(_) => Ok(()),
            None => {
                self.arity.insert(pred.to_owned(), n);
                Ok(())
            }
        }
    }

    fn atom(&mut self, a: &Atom, vars: &mut BTreeMap<String, usize>, body: bool) -> Result<CAtom, QueryError> {
        let pred = canonical_predicate(&a.pred);
        if body && !self.known.contains(&pred) {
            return Err(QueryError::UnknownPredicate(pred));
        }
        self.check_arity(&pred, a.args.len())?;
        let args = a.args.iter().map(|t| slot(t, vars)).collect();
        Ok(CAtom { pred, args })
    }

    fn rule(&mut self, r: &Rule) -> Result<CRule, QueryError> {
        let mut vars = BTreeMap::new();
        let head = self.atom(&r.head, &mut vars, false)?;
        let mut body = Vec::new();
        let mut calls = Vec::new();
        let mut implicit = r.call_vars().into_iter();
        for l in &r.body {
            let (call, out) = match l {
                Literal::Atom(a) => {
                    body.push(self.atom(a, &mut vars, true)?);
                    continue;
                }
                Literal::Assign { var, call } => (call, var.as_str()),
                Literal::Call(call) => (call, implicit.next().expect("checked by the parser")),
            };
            let name = canonical_function(&call.name);
            if self.functions.get(&name).is_none() {
                return Err(QueryError::UnknownFunction(name));
            }
            let args = call
                .args
                .iter()
                .map(|a| match a {
                    FnArg::Term(t) => Ok(CArg::Slot(slot(t, &mut vars))),
                    FnArg::Atom(a) => Ok(CArg::Atom(self.atom(a, &mut vars, true)?)),
                })
                .collect::<Result<_, QueryError>>()?;
            let out = slot(&Term::Var(out.to_owned()), &mut vars);
            let Slot::Var(out) = out else { unreachable!() };
            calls.push(CCall { name, args, out });
        }
        let in_body: BTreeSet<usize> = body.iter().flat_map(CAtom::slots).collect();
        let mut used: BTreeSet<usize> = head.slots().collect();
        for c in &calls {
            used.insert(c.out);
            for a in &c.args {
                match a {
                    CArg::Slot(Slot::Var(i)) => {
                        used.insert(*i);
                    }
                    CArg::Slot(Slot::Const(_)) => {}
                    CArg::Atom(a) => used.extend(a.slots()),
                }
            }
        }
        let keep = used.intersection(&in_body).copied().collect();
        let plans = std::iter::once(None).chain((0..body.len()).map(Some)).map(|f| plan(&body, f)).collect();
        Ok(CRule { label: r.label(), head, body, calls, nvars: vars.len(), keep, stratum: 0, plans })
    }
}

fn slot(t: &Term, vars: &mut BTreeMap<String, usize>) -> Slot {
    match t {
        Term::Const(v) => Slot::Const(v.clone()),
        Term::Var(v) => {
            let n = vars.len();
            Slot::Var(*vars.entry(v.clone()).or_insert(n))
        }
    }
}

/// Body predicates of a rule, including those inside function arguments.
fn dependencies(r: &CRule) -> impl Iterator<Item = &str> {
    let in_calls = r.calls.iter().flat_map(|c| c.args.iter()).filter_map(|a| match a {
        CArg::Atom(a) => Some(a.pred.as_str()),
        CArg::Slot(_) => None,
    });
    r.body.iter().map(|a| a.pred.as_str()).chain(in_calls)
}

/// Assigns strata so that a rule with a function call sits strictly above
/// everything it reads; recursion through a call is refused.
fn stratify(rules: &mut [CRule]) -> Result<usize, QueryError> {
    let idb: BTreeSet<String> = rules.iter().map(|r| r.head.pred.clone()).collect();
    let mut consumers: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in rules.iter() {
        for p in dependencies(r).filter(|p| idb.contains(*p)) {
            consumers.entry(p).or_default().insert(r.head.pred.as_str());
        }
    }
    let reaches = |from: &str, to: &str| {
        let mut seen = BTreeSet::from([from]);
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            for &c in consumers.get(n).into_iter().flatten() {
                if seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        false
    };
    for r in rules.iter().filter(|r| !r.calls.is_empty()) {
        if dependencies(r).any(|p| idb.contains(p) && reaches(&r.head.pred, p)) {
            return Err(QueryError::NonStratifiedFnCall { rule: r.label.clone() });
        }
    }
    let mut level: BTreeMap<String, usize> = BTreeMap::new();
    loop {
        let mut changed = false;
        for r in rules.iter() {
            let step = usize::from(!r.calls.is_empty());
            let need = dependencies(r).map(|p| level.get(p).map_or(0, |l| l + step)).max().unwrap_or(0);
            let cur = level.entry(r.head.pred.clone()).or_insert(0);
            if need > *cur {
                *cur = need;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for r in rules.iter_mut() {
        r.stratum = level[&r.head.pred];
    }
    Ok(level.values().copied().max().map_or(0, |m| m + 1))
}

/// Rule evaluation over one graph store, metrics store and function set.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    store: &'a GraphStore,
    metrics: &'a MetricsStore,
    options: QueryOptions,
    functions: FnRegistry,
}

impl<'a> Engine<'a> {
    /// An engine with no metrics and the built-in functions.
    pub fn new(store: &'a GraphStore) -> Self {
        Self { store, metrics: &EMPTY_METRICS, options: QueryOptions::default(), functions: FnRegistry::default() }
    }

    pub fn with_metrics(self, metrics: &'a MetricsStore) -> Self {
        Self { metrics, ..self }
    }

    pub fn with_options(self, options: QueryOptions) -> Self {
        Self { options, ..self }
    }

    pub fn with_functions(self, functions: FnRegistry) -> Self {
        Self { functions, ..self }
    }

    pub fn context(&self) -> Context<'a> {
        Context { store: self.store, metrics: self.metrics, options: self.options }
    }

    fn compiler(&self, rules: &[Rule]) -> Compiler<'_> {
        let mut known: BTreeSet<String> = SCHEMA.iter().map(|(p, _)| p.to_string()).collect();
        known.extend(self.store.relations().keys().cloned());
        known.extend(rules.iter().map(|r| canonical_predicate(&r.head.pred)));
        let mut arity: BTreeMap<String, usize> = SCHEMA.iter().map(|&(p, n)| (p.to_owned(), n)).collect();
        for (p, r) in self.store.relations() {
            if let Some(t) = r.first() {
                arity.entry(p.clone()).or_insert(t.len());
            }
        }
        Compiler { arity, known, functions: &self.functions }
    }

    fn compile(&self, rules: &[Rule]) -> Result<Compiled, QueryError> {
        let mut c = self.compiler(rules);
        let mut compiled = rules.iter().map(|r| c.rule(r)).collect::<Result<Vec<_>, _>>()?;
        if compiled.iter().any(|r| r.head.pred == "is_leaf") {
            return Err(QueryError::BuiltinFact("is_leaf".into()));
        }
        let strata = stratify(&mut compiled)?;
        Ok(Compiled { rules: compiled, strata, arity: c.arity, known: c.known })
    }

    /// Every relation derivable from the store and `rules`.
    pub fn run(&self, rules: &[Rule]) -> Result<Evaluation, QueryError> {
        self.run_with(rules, Iteration::SemiNaive)
    }

    pub fn run_with(&self, rules: &[Rule], iteration: Iteration) -> Result<Evaluation, QueryError> {
        Ok(self.execute(&self.compile(rules)?, iteration))
    }

    fn execute(&self, c: &Compiled, iteration: Iteration) -> Evaluation {
        let mut ev = Evaluation { relations: self.store.relations().clone(), failures: Vec::new() };
        ev.relations.insert("is_leaf".into(), self.store.leaf_relation());
        for s in 0..c.strata {
            let in_stratum: Vec<&CRule> = c.rules.iter().filter(|r| r.stratum == s).collect();
            match iteration {
                Iteration::SemiNaive => self.semi_naive(&in_stratum, &mut ev),
                Iteration::Naive => self.naive(&in_stratum, &mut ev),
            }
        }
        ev.failures.sort_by(|a, b| (&a.rule, a.error.to_string()).cmp(&(&b.rule, b.error.to_string())));
        ev.failures.dedup();
        ev
    }

    fn semi_naive(&self, rules: &[&CRule], ev: &mut Evaluation) {
        let (with_fn, relational): (Vec<&CRule>, Vec<&CRule>) = rules.iter().partition(|r| !r.calls.is_empty());
        let mut derived = Relations::new();
        for r in &with_fn {
            self.fire_calls(r, &ev.relations, &mut derived, &mut ev.failures);
        }
        for r in &relational {
            derive(r, &r.plans[0], None, &ev.relations, &mut derived);
        }
        let mut delta = merge(&mut ev.relations, derived);
        let recursive: BTreeSet<&str> = rules.iter().map(|r| r.head.pred.as_str()).collect();
        while !delta.is_empty() {
            let mut next = Relations::new();
            for r in &relational {
                for (i, a) in r.body.iter().enumerate() {
                    if let (true, Some(d)) = (recursive.contains(a.pred.as_str()), delta.get(&a.pred)) {
                        derive(r, &r.plans[i + 1], Some((i, d)), &ev.relations, &mut next);
                    }
                }
            }
            delta = merge(&mut ev.relations, next);
        }
    }

    fn naive(&self, rules: &[&CRule], ev: &mut Evaluation) {
        loop {
            let mut derived = Relations::new();
            let mut failures = Vec::new();
            for r in rules {
                if r.calls.is_empty() {
                    derive(r, &r.plans[0], None, &ev.relations, &mut derived);
                } else {
                    self.fire_calls(r, &ev.relations, &mut derived, &mut failures);
                }
            }
            if merge(&mut ev.relations, derived).is_empty() {
                ev.failures.extend(failures);
                return;
            }
        }
    }

    /// One pass of a rule with function calls. Its inputs all sit in lower
    /// strata, so they are complete.
    fn fire_calls(&self, r: &CRule, db: &Relations, out: &mut Relations, failures: &mut Vec<Failure>) {
        let atoms: Vec<(&CAtom, Option<&Relation>)> = r.plans[0].iter().map(|&i| (&r.body[i], db.get(&r.body[i].pred))).collect();
        let mut keys: BTreeSet<Vec<Option<Value>>> = BTreeSet::new();
        join(&atoms, &mut vec![None; r.nvars], &mut |b| {
            keys.insert(r.keep.iter().map(|&i| b[i].clone()).collect());
        });
        let ctx = self.context();
        'binding: for key in keys {
            let mut b: Binding = vec![None; r.nvars];
            for (&i, v) in r.keep.iter().zip(key) {
                b[i] = v;
            }
            for c in &r.calls {
                let args: Vec<FnInput> = c.args.iter().map(|a| call_input(a, &b, db)).collect();
                let f = self.functions.get(&c.name).expect("checked at compile time");
                match f(&ctx, &args) {
                    Ok(v) => match &b[c.out] {
                        Some(x) if *x != v => continue 'binding,
                        _ => b[c.out] = Some(v),
                    },
                    Err(error) => {
                        failures.push(Failure {
                            rule: r.label.clone(),
                            pred: r.head.pred.clone(),
                            head: r.head.args.iter().map(|s| resolve(s, &b).cloned()).collect(),
                            error,
                        });
                        continue 'binding;
                    }
                }
            }
            let t = r.head.ground(&b);
            if !db.get(&r.head.pred).is_some_and(|rel| rel.contains(&t)) {
                out.entry(r.head.pred.clone()).or_default().insert(t);
            }
        }
    }

    /// All bindings of `query`'s variables. When nothing matches but a
    /// function call failed for a binding the query asks about, that failure
    /// is returned instead.
    pub fn query(&self, rules: &[Rule], query: &Atom) -> Result<Answers, QueryError> {
        let c = self.compile(rules)?;
        self.query_compiled(&c, query)
    }

    fn query_compiled(&self, c: &Compiled, query: &Atom) -> Result<Answers, QueryError> {
        let pred = canonical_predicate(&query.pred);
        if !c.known.contains(&pred) {
            return Err(QueryError::UnknownPredicate(pred));
        }
        if let Some(&want) = c.arity.get(&pred).filter(|&&w| w != query.args.len()) {
            return Err(QueryError::ArityMismatch { pred, want, got: query.args.len() });
        }
        answers(&self.execute(c, Iteration::SemiNaive), query)
    }

    /// Runs the command form `name arg ...`, for example `e2e_delay nf1 nf2`;
    /// missing trailing arguments become result variables.
    pub fn command(&self, rules: &[Rule], command: &str) -> Result<Answers, QueryError> {
        let c = self.compile(rules)?;
        let pred = canonical_predicate(command.split_whitespace().next().unwrap_or_default());
        let arity = *c.arity.get(&pred).ok_or(QueryError::UnknownPredicate(pred))?;
        self.query_compiled(&c, &parse_command(command, arity)?)
    }
}

struct Compiled {
    rules: Vec<CRule>,
    strata: usize,
    arity: BTreeMap<String, usize>,
    known: BTreeSet<String>,
}

fn call_input(a: &CArg, b: &Binding, db: &Relations) -> FnInput {
    match a {
        CArg::Slot(s) => FnInput::Value(resolve(s, b).expect("call terms are bound").clone()),
        CArg::Atom(atom) => {
            let mut free: Vec<usize> = Vec::new();
            for i in atom.slots() {
                if b[i].is_none() && !free.contains(&i) {
                    free.push(i);
                }
            }
            let mut set = BTreeSet::new();
            let mut scratch = b.clone();
            match_atom(atom, db.get(&atom.pred), &mut scratch, &mut |b| {
                set.insert(free.iter().map(|&i| b[i].clone().expect("matched")).collect());
            });
            FnInput::Set(set)
        }
    }
}

fn derive(r: &CRule, order: &[usize], delta: Option<(usize, &Relation)>, db: &Relations, out: &mut Relations) {
    let atoms: Vec<(&CAtom, Option<&Relation>)> = order
        .iter()
        .map(|&i| {
            let rel = match delta {
                Some((d, rel)) if d == i => Some(rel),
                _ => db.get(&r.body[i].pred),
            };
            (&r.body[i], rel)
        })
        .collect();
    let existing = db.get(&r.head.pred);
    join(&atoms, &mut vec![None; r.nvars], &mut |b| {
        let t = r.head.ground(b);
        if !existing.is_some_and(|rel| rel.contains(&t)) {
            out.entry(r.head.pred.clone()).or_default().insert(t);
        }
    });
}

/// Adds `new` to `db` and returns what was not already there.
fn merge(db: &mut Relations, new: Relations) -> Relations {
    let mut delta = Relations::new();
    for (p, tuples) in new {
        let rel = db.entry(p.clone()).or_default();
        let fresh: Relation = tuples.into_iter().filter(|t| rel.insert(t.clone())).collect();
        if !fresh.is_empty() {
            delta.insert(p, fresh);
        }
    }
    delta
}

/// Rows of an evaluation that match `query`.
pub fn answers(ev: &Evaluation, query: &Atom) -> Result<Answers, QueryError> {
    let pred = canonical_predicate(&query.pred);
    let mut vars: Vec<String> = Vec::new();
    for v in query.vars() {
        if !vars.iter().any(|x| x == v) {
            vars.push(v.to_owned());
        }
    }
    let mut rows = BTreeSet::new();
    for t in ev.relations.get(&pred).into_iter().flatten() {
        if t.len() != query.args.len() {
            continue;
        }
        let mut b: BTreeMap<&str, &Value> = BTreeMap::new();
        let ok = query.args.iter().zip(t).all(|(q, v)| match q {
            Term::Const(c) => c == v,
            Term::Var(name) => *b.entry(name.as_str()).or_insert(v) == v,
        });
        if ok {
            rows.insert(vars.iter().map(|v| b[v.as_str()].clone()).collect());
        }
    }
    if rows.is_empty() {
        let hit = ev.failures.iter().find(|f| {
            f.pred == pred
                && f.head.len() == query.args.len()
                && query.args.iter().zip(&f.head).all(|(q, h)| match (q, h) {
                    (Term::Const(c), Some(v)) => c == v,
                    _ => true,
                })
        });
        if let Some(f) = hit {
            return Err(QueryError::Fn { rule: f.rule.clone(), error: f.error.clone() });
        }
    }
    Ok(Answers { vars, rows })
}

/// Semi-naive evaluation of `query` with no metrics.
pub fn evaluate(store: &GraphStore, rules: &[Rule], query: &Atom) -> Result<Answers, QueryError> {
    Engine::new(store).query(rules, query)
}
