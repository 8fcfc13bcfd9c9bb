use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::units::Quantity;

/// Source position of a declaration or reference. Two positions always
/// compare equal, so ASTs built from differently formatted sources match.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl PartialEq for Pos {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub measurements: Vec<MeasurementDecl>,
    pub zones: Vec<ZoneDecl>,
    pub actions: Vec<ActionDecl>,
}

impl Program {
    pub fn measurement(&self, id: &str) -> Option<&MeasurementDecl> {
        self.measurements.iter().find(|m| m.id == id)
    }

    pub fn zone_index(&self, id: &str) -> Option<usize> {
        self.zones.iter().position(|z| z.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDecl {
    pub id: String,
    pub function: String,
    pub args: Vec<Arg>,
    #[serde(skip)]
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Arg {
    Location { name: String },
    Literal { value: f64, unit: super::units::Unit },
}

impl Arg {
    pub fn literal(q: Quantity) -> Self {
        Arg::Literal { value: q.value, unit: q.unit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneDecl {
    pub id: String,
    pub aggregate: Aggregate,
    pub cmp: Cmp,
    pub threshold: Quantity,
    #[serde(skip)]
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub kind: AggKind,
    pub window: u32,
    pub expr: MExpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggKind {
    Mean,
    Max,
    Min,
    Sum,
}

impl AggKind {
    pub const ALL: [AggKind; 4] = [AggKind::Mean, AggKind::Max, AggKind::Min, AggKind::Sum];

    pub fn keyword(self) -> &'static str {
        match self {
            AggKind::Mean => "mean",
            AggKind::Max => "max",
            AggKind::Min => "min",
            AggKind::Sum => "sum",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.keyword() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
}

impl Cmp {
    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Eq => "==",
        }
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Eq => (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0),
        }
    }
}

/// Expression over measurements inside an aggregate or a payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MExpr {
    Ref {
        id: String,
        #[serde(skip)]
        pos: Pos,
    },
    Add {
        lhs: Box<MExpr>,
        rhs: Box<MExpr>,
    },
    Sub {
        lhs: Box<MExpr>,
        rhs: Box<MExpr>,
    },
    /// k-ary node introduced by decomposition, e.g. `max(m1a, m1b, m1c)`.
    Combine {
        op: Combiner,
        args: Vec<MExpr>,
    },
}

impl MExpr {
    pub fn reference(id: impl Into<String>) -> Self {
        MExpr::Ref { id: id.into(), pos: Pos::default() }
    }

    /// Every measurement reference, left to right.
    pub fn refs(&self) -> Vec<(&str, Pos)> {
        let mut out = Vec::new();
        self.walk_refs(&mut |id, pos| out.push((id, pos)));
        out
    }

    fn walk_refs<'a>(&'a self, f: &mut impl FnMut(&'a str, Pos)) {
        match self {
            MExpr::Ref { id, pos } => f(id, *pos),
            MExpr::Add { lhs, rhs } | MExpr::Sub { lhs, rhs } => {
                lhs.walk_refs(f);
                rhs.walk_refs(f);
            }
            MExpr::Combine { args, .. } => args.iter().for_each(|a| a.walk_refs(f)),
        }
    }

    pub fn has_combine(&self) -> bool {
        match self {
            MExpr::Ref { .. } => false,
            MExpr::Add { lhs, rhs } | MExpr::Sub { lhs, rhs } => lhs.has_combine() || rhs.has_combine(),
            MExpr::Combine { .. } => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Max,
    Sum,
    Min,
}

impl Combiner {
    pub fn keyword(self) -> &'static str {
        match self {
            Combiner::Max => "max",
            Combiner::Sum => "sum",
            Combiner::Min => "min",
        }
    }

    pub fn apply(self, values: impl IntoIterator<Item = f64>) -> f64 {
        let mut it = values.into_iter();
        let first = it.next().unwrap_or(0.0);
        it.fold(first, |acc, v| match self {
            Combiner::Max => acc.max(v),
            Combiner::Sum => acc + v,
            Combiner::Min => acc.min(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unsupported combiner {0:?}; expected max, sum or min")]
pub struct UnsupportedCombiner(pub String);

impl FromStr for Combiner {
    type Err = UnsupportedCombiner;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Combiner::Max),
            "sum" => Ok(Combiner::Sum),
            "min" => Ok(Combiner::Min),
            other => Err(UnsupportedCombiner(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDecl {
    pub trigger: Trigger,
    pub action: Action,
    #[serde(skip)]
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trigger {
    Transition { from: String, to: String },
    Entry { to: String },
}

impl Trigger {
    pub fn to(&self) -> &str {
        match self {
            Trigger::Transition { to, .. } | Trigger::Entry { to } => to,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Notify { dest: String, payload: Vec<PayloadItem> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PayloadItem {
    Text { value: String },
    Expr { expr: MExpr },
}
