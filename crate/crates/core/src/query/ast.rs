use std::collections::BTreeSet;
use std::fmt;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::measure::{Quantity, Unit};

/// A ground value: a symbol, or a number with a unit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Sym(String),
    Num { value: OrderedFloat<f64>, unit: Unit },
}

impl Value {
    pub fn sym(s: impl Into<String>) -> Self {
        Value::Sym(s.into())
    }

    pub fn num(value: f64, unit: Unit) -> Self {
        Value::Num { value: OrderedFloat(value), unit }
    }

    pub fn as_sym(&self) -> Option<&str> {
        match self {
            Value::Sym(s) => Some(s),
            Value::Num { .. } => None,
        }
    }

    pub fn as_quantity(&self) -> Option<Quantity> {
        match *self {
            Value::Num { value, unit } => Some(Quantity::new(value.0, unit)),
            Value::Sym(_) => None,
        }
    }
}

impl From<Quantity> for Value {
    fn from(q: Quantity) -> Self {
        Value::num(q.value, q.unit)
    }
}

/// Symbols that print without quotes: a lower-case initial followed by
/// identifier characters.
pub(crate) fn is_bare_constant(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_lowercase()) && chars.all(is_ident_char)
}

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Sym(s) if is_bare_constant(s) => f.write_str(s),
            Value::Sym(s) => {
                f.write_str("'")?;
                for c in s.chars() {
                    if c == '\'' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("'")
            }
            Value::Num { value, unit } => write!(f, "{}{}", value.0, unit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    Var(String),
    Const(Value),
}

impl Term {
    pub fn var(name: impl Into<String>) -> Self {
        Term::Var(name.into())
    }

    pub fn sym(name: impl Into<String>) -> Self {
        Term::Const(Value::sym(name))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => f.write_str(v),
            Term::Const(c) => c.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Atom {
    pub pred: String,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn new(pred: impl Into<String>, args: Vec<Term>) -> Self {
        Self { pred: pred.into(), args }
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.args.iter().filter_map(|t| match t {
            Term::Var(v) => Some(v.as_str()),
            Term::Const(_) => None,
        })
    }

    pub fn is_ground(&self) -> bool {
        self.vars().next().is_none()
    }
}

fn comma_list<T: fmt::Display>(f: &mut fmt::Formatter<'_>, items: &[T]) -> fmt::Result {
    for (i, t) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        t.fmt(f)?;
    }
    Ok(())
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pred)?;
        if !self.args.is_empty() {
            f.write_str("(")?;
            comma_list(f, &self.args)?;
            f.write_str(")")?;
        }
        Ok(())
    }
}

/// Argument of an `fn_` call. An atom argument stands for the set of
/// tuples of its free variables that satisfy it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FnArg {
    Term(Term),
    Atom(Atom),
}

impl fmt::Display for FnArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FnArg::Term(t) => t.fmt(f),
            FnArg::Atom(a) => a.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FnCall {
    pub name: String,
    pub args: Vec<FnArg>,
}

impl fmt::Display for FnCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        comma_list(f, &self.args)?;
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Literal {
    Atom(Atom),
    /// `V == fn_x(...)`.
    Assign { var: String, call: FnCall },
    /// A bare call; its result binds the head variable nothing else binds.
    Call(FnCall),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Atom(a) => a.fmt(f),
            Literal::Assign { var, call } => write!(f, "{var} == {call}"),
            Literal::Call(c) => c.fmt(f),
        }
    }
}

/// A rule, or a fact when the body is empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rule {
    pub id: Option<String>,
    pub head: Atom,
    pub body: Vec<Literal>,
}

impl Rule {
    pub fn is_fact(&self) -> bool {
        self.body.is_empty()
    }

    pub fn has_fn(&self) -> bool {
        self.body.iter().any(|l| !matches!(l, Literal::Atom(_)))
    }

    /// Variables bound by relational atoms and assignments.
    pub fn bound_vars(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        for l in &self.body {
            match l {
                Literal::Atom(a) => out.extend(a.vars()),
                Literal::Assign { var, .. } => {
                    out.insert(var.as_str());
                }
                Literal::Call(_) => {}
            }
        }
        out
    }

    /// Head variables that bare calls bind, in head order.
    pub fn call_vars(&self) -> Vec<&str> {
        let bound = self.bound_vars();
        let mut seen = BTreeSet::new();
        self.head.vars().filter(|v| !bound.contains(v) && seen.insert(*v)).collect()
    }

    /// A label for diagnostics: the id, or the rule text.
    pub fn label(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.to_string())
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(id) = &self.id {
            write!(f, "{id}: ")?;
        }
        self.head.fmt(f)?;
        if !self.body.is_empty() {
            f.write_str(" <= ")?;
            comma_list(f, &self.body)?;
        }
        Ok(())
    }
}

/// Maps spelling variants onto one predicate name: an upper-case initial is
/// folded (`Link` is `link`), `is_Leaf` is `is_leaf`, and the endpoint
/// roles `is_source` / `is_dst` are the `is_ingress` / `is_egress` facts.
pub fn canonical_predicate(p: &str) -> String {
    let mut s = String::with_capacity(p.len());
    let mut chars = p.chars();
    if let Some(c) = chars.next() {
        s.push(c.to_ascii_lowercase());
    }
    s.extend(chars);
    match s.as_str() {
        "is_Leaf" => "is_leaf".into(),
        "is_source" | "is_src" => "is_ingress".into(),
        "is_dst" | "is_destination" => "is_egress".into(),
        _ => s,
    }
}

/// Canonical spelling of function names (`Fn_h2h_delay` is `fn_h2h_delay`).
pub fn canonical_function(name: &str) -> String {
    let mut s = name.to_owned();
    s.replace_range(..3, "fn_");
    s
}
