use std::collections::{BTreeMap, BTreeSet};

use super::ast::{canonical_predicate, Atom, Term, Value};
use super::parser::parse_facts;
use super::QueryError;

pub type Relation = BTreeSet<Vec<Value>>;

/// Predicates every store understands, with their arity.
pub const SCHEMA: [(&str, usize); 7] =
    [("sub", 2), ("link", 2), ("node", 1), ("is_ingress", 1), ("is_egress", 1), ("is_compute", 1), ("is_leaf", 1)];

pub(crate) fn schema_arity(pred: &str) -> Option<usize> {
    SCHEMA.iter().find(|(p, _)| *p == pred).map(|&(_, n)| n)
}

/// Ground facts of a service graph, held per predicate. Tuples sort by their
/// first argument, so a relation doubles as an index on it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphStore {
    relations: BTreeMap<String, Relation>,
    nodes: BTreeSet<Value>,
}

impl GraphStore {
    /// Loads fact text, one `pred(arg, ...)` per statement.
    /// `sub(x, a, b, ...)` stands for `sub(x, a)`, `sub(x, b)`, ... and
    /// `node(a, b, ...)` for `node(a)`, `node(b)`, ...
    pub fn load(text: &str) -> Result<Self, QueryError> {
        let facts = parse_facts(text)?;
        Self::from_facts(facts.into_iter().map(|a| {
            let args = a.args.into_iter().map(|t| match t {
                Term::Const(v) => v,
                Term::Var(_) => unreachable!("facts are ground"),
            });
            (a.pred, args.collect())
        }))
    }

    pub fn from_facts<P: AsRef<str>>(facts: impl IntoIterator<Item = (P, Vec<Value>)>) -> Result<Self, QueryError> {
        let mut s = Self::default();
        for (pred, args) in facts {
            s.insert(pred.as_ref(), args)?;
        }
        s.check_acyclic()?;
        Ok(s)
    }

    /// A copy with one more fact.
    pub fn with_fact(&self, pred: &str, args: Vec<Value>) -> Result<Self, QueryError> {
        let mut s = self.clone();
        s.insert(pred, args)?;
        s.check_acyclic()?;
        Ok(s)
    }

    fn insert(&mut self, pred: &str, args: Vec<Value>) -> Result<(), QueryError> {
        let pred = canonical_predicate(pred);
        if pred == "is_leaf" {
            return Err(QueryError::BuiltinFact(pred));
        }
        match pred.as_str() {
            "sub" if args.len() > 2 => {
                for child in &args[1..] {
                    self.insert_one(&pred, vec![args[0].clone(), child.clone()])?;
                }
                Ok(())
            }
            "node" if args.len() > 1 => {
                for n in args {
                    self.insert_one(&pred, vec![n])?;
                }
                Ok(())
            }
            _ => self.insert_one(&pred, args),
        }
    }

    fn insert_one(&mut self, pred: &str, args: Vec<Value>) -> Result<(), QueryError> {
        let want = schema_arity(pred).or_else(|| self.relations.get(pred).and_then(|r| r.first()).map(Vec::len));
        if let Some(want) = want.filter(|&w| w != args.len()) {
            return Err(QueryError::ArityMismatch { pred: pred.to_owned(), want, got: args.len() });
        }
        self.nodes.extend(args.iter().filter(|v| matches!(v, Value::Sym(_))).cloned());
        self.relations.entry(pred.to_owned()).or_default().insert(args);
        Ok(())
    }

    fn check_acyclic(&self) -> Result<(), QueryError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: BTreeMap<&Value, Mark> = BTreeMap::new();
        for root in self.relation("sub").into_iter().flatten().map(|t| &t[0]) {
            if marks.contains_key(root) {
                continue;
            }
            // Iterative DFS; `path` holds the open ancestors.
            let mut path: Vec<(&Value, Vec<&Value>)> = vec![(root, self.children(root).collect())];
            marks.insert(root, Mark::Open);
            while let Some((node, pending)) = path.last_mut() {
                let node = *node;
                match pending.pop() {
                    Some(c) => match marks.get(c) {
                        Some(Mark::Open) => {
                            let start = path.iter().position(|(n, _)| *n == c).expect("open nodes are on the path");
                            let mut cycle: Vec<String> = path[start..].iter().map(|(n, _)| n.to_string()).collect();
                            cycle.push(c.to_string());
                            return Err(QueryError::CyclicSub { cycle });
                        }
                        Some(Mark::Done) => {}
                        None => {
                            marks.insert(c, Mark::Open);
                            path.push((c, self.children(c).collect()));
                        }
                    },
                    None => {
                        marks.insert(node, Mark::Done);
                        path.pop();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn relation(&self, pred: &str) -> Option<&Relation> {
        self.relations.get(pred)
    }

    pub fn relations(&self) -> &BTreeMap<String, Relation> {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.relations.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every fact in key-value form: the predicate followed by its arguments.
    pub fn kvp(&self) -> impl Iterator<Item = Vec<Value>> + '_ {
        self.relations.iter().flat_map(|(p, r)| {
            r.iter().map(move |t| std::iter::once(Value::sym(p.as_str())).chain(t.iter().cloned()).collect())
        })
    }

    /// Symbols appearing in any fact.
    pub fn nodes(&self) -> &BTreeSet<Value> {
        &self.nodes
    }

    pub fn contains_node(&self, x: &str) -> bool {
        self.nodes.contains(&Value::sym(x))
    }

    /// Tuples of `pred` whose first argument is `first`.
    pub fn with_first<'a>(&'a self, pred: &str, first: &'a Value) -> impl Iterator<Item = &'a Vec<Value>> + 'a {
        scan_first(self.relations.get(pred), first)
    }

    /// Direct sub-elements of `x`.
    pub fn children<'a>(&'a self, x: &'a Value) -> impl Iterator<Item = &'a Value> + 'a {
        self.with_first("sub", x).map(|t| &t[1])
    }

    /// True iff `x` has no sub-elements.
    pub fn is_leaf(&self, x: &str) -> Result<bool, QueryError> {
        if !self.contains_node(x) {
            return Err(QueryError::UnknownNode(x.to_owned()));
        }
        Ok(self.children(&Value::sym(x)).next().is_none())
    }

    /// The `is_leaf` relation over every known node.
    pub fn leaf_relation(&self) -> Relation {
        self.nodes.iter().filter(|n| self.children(n).next().is_none()).map(|n| vec![n.clone()]).collect()
    }

    /// Strict descendants of `x` through `sub`.
    pub fn descendants(&self, x: &str) -> BTreeSet<Value> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<Value> = vec![Value::sym(x)];
        while let Some(n) = stack.pop() {
            for c in self.children(&n) {
                if out.insert(c.clone()) {
                    stack.push(c.clone());
                }
            }
        }
        out
    }

    /// Leaf descendants of `x`.
    pub fn leaves_under(&self, x: &str) -> BTreeSet<Value> {
        self.descendants(x).into_iter().filter(|n| self.children(n).next().is_none()).collect()
    }

    /// Whether the unary fact `role(x)` holds (`role` accepts aliases).
    pub fn has_role(&self, role: &str, x: &Value) -> bool {
        self.relations.get(&canonical_predicate(role)).is_some_and(|r| r.contains(std::slice::from_ref(x)))
    }

    /// Shortest directed `link` path from `src` to `dst`, ties broken by
    /// symbol order. With `leaves_only`, every node on it must be a leaf.
    pub fn link_path(&self, src: &Value, dst: &Value, leaves_only: bool) -> Option<Vec<Value>> {
        let allowed = |v: &Value| !leaves_only || self.children(v).next().is_none();
        if !allowed(src) || !allowed(dst) {
            return None;
        }
        let mut prev: BTreeMap<&Value, &Value> = BTreeMap::new();
        let mut frontier = std::collections::VecDeque::from([src]);
        let mut seen: BTreeSet<&Value> = BTreeSet::from([src]);
        while let Some(n) = frontier.pop_front() {
            if n == dst {
                let mut path = vec![n.clone()];
                let mut cur = n;
                while let Some(&p) = prev.get(cur) {
                    path.push(p.clone());
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            for t in self.with_first("link", n) {
                if allowed(&t[1]) && seen.insert(&t[1]) {
                    prev.insert(&t[1], n);
                    frontier.push_back(&t[1]);
                }
            }
        }
        None
    }

    /// The store as fact text that [`GraphStore::load`] reads back.
    pub fn to_facts(&self) -> String {
        let mut out = String::new();
        for (p, r) in &self.relations {
            for t in r {
                out.push_str(&Atom::new(p.clone(), t.iter().cloned().map(Term::Const).collect()).to_string());
                out.push('\n');
            }
        }
        out
    }
}

pub(crate) fn scan_first<'a>(rel: Option<&'a Relation>, first: &'a Value) -> impl Iterator<Item = &'a Vec<Value>> + 'a {
    rel.into_iter().flat_map(move |r| {
        r.range(vec![first.clone()]..).take_while(move |t| t.first() == Some(first))
    })
}
