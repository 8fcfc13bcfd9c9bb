//! Program rewriting when a monitored function is split into replicas.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::ast::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecompositionRule {
    /// `k` parallel replicas whose readings are merged with `combiner`.
    Parallel { k: usize, combiner: Combiner },
    /// A chain measured end to end by a single measurement.
    Serial,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewriteError {
    #[error("no measurement named {0:?}")]
    UnknownMeasurement(String),
    #[error(transparent)]
    UnsupportedCombiner(#[from] UnsupportedCombiner),
    #[error("a parallel decomposition needs at least one replica")]
    NoReplicas,
    #[error("replica name {0:?} is already declared")]
    NameClash(String),
    #[error("cannot parse decomposition rule {0:?}")]
    BadRule(String),
}

impl FromStr for DecompositionRule {
    type Err = RewriteError;

    /// Accepts `serial` or `parallel(K, max|sum|min)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t == "serial" {
            return Ok(DecompositionRule::Serial);
        }
        let bad = || RewriteError::BadRule(s.to_owned());
        let inner = t.strip_prefix("parallel(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
        let (k, c) = inner.split_once(',').ok_or_else(bad)?;
        let k: usize = k.trim().parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(RewriteError::NoReplicas);
        }
        Ok(DecompositionRule::Parallel { k, combiner: c.trim().parse()? })
    }
}

impl fmt::Display for DecompositionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecompositionRule::Serial => f.write_str("serial"),
            DecompositionRule::Parallel { k, combiner } => write!(f, "parallel({k}, {})", combiner.keyword()),
        }
    }
}

/// Replica names: `m1a`, `m1b`, ... up to 26 replicas, `m1_27` beyond.
pub fn replica_id(id: &str, i: usize) -> String {
    if i < 26 {
        format!("{id}{}", char::from(b'a' + i as u8))
    } else {
        format!("{id}_{}", i + 1)
    }
}

fn replica_suffix(i: usize) -> String {
    if i < 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        (i + 1).to_string()
    }
}

pub fn rewrite_for_decomposition(
    program: &Program,
    subst: &BTreeMap<String, DecompositionRule>,
) -> Result<Program, RewriteError> {
    for id in subst.keys() {
        if program.measurement(id).is_none() {
            return Err(RewriteError::UnknownMeasurement(id.clone()));
        }
    }
    let parallel: BTreeMap<&str, (usize, Combiner)> = subst
        .iter()
        .filter_map(|(id, r)| match *r {
            DecompositionRule::Parallel { k, combiner } => Some((id.as_str(), (k, combiner))),
            DecompositionRule::Serial => None,
        })
        .collect();
    if parallel.values().any(|&(k, _)| k == 0) {
        return Err(RewriteError::NoReplicas);
    }

    let mut out = program.clone();
    out.measurements.clear();
    for m in &program.measurements {
        let Some(&(k, _)) = parallel.get(m.id.as_str()) else {
            out.measurements.push(m.clone());
            continue;
        };
        for i in 0..k {
            let id = replica_id(&m.id, i);
            if program.measurement(&id).is_some() || program.zone_index(&id).is_some() {
                return Err(RewriteError::NameClash(id));
            }
            let sfx = replica_suffix(i);
            let args = m
                .args
                .iter()
                .map(|a| match a {
                    Arg::Location { name } => Arg::Location { name: format!("{name}.{sfx}") },
                    lit => lit.clone(),
                })
                .collect();
            out.measurements.push(MeasurementDecl { id, function: m.function.clone(), args, pos: m.pos });
        }
    }

    let swap = |e: &mut MExpr| substitute(e, &parallel);
    for z in &mut out.zones {
        swap(&mut z.aggregate.expr);
    }
    for a in &mut out.actions {
        let Action::Notify { payload, .. } = &mut a.action;
        for item in payload {
            if let PayloadItem::Expr { expr } = item {
                swap(expr);
            }
        }
    }
    Ok(out)
}

fn substitute(e: &mut MExpr, parallel: &BTreeMap<&str, (usize, Combiner)>) {
    match e {
        MExpr::Ref { id, pos } => {
            if let Some(&(k, op)) = parallel.get(id.as_str()) {
                let pos = *pos;
                let args = (0..k).map(|i| MExpr::Ref { id: replica_id(id, i), pos }).collect();
                *e = MExpr::Combine { op, args };
            }
        }
        MExpr::Add { lhs, rhs } | MExpr::Sub { lhs, rhs } => {
            substitute(lhs, parallel);
            substitute(rhs, parallel);
        }
        MExpr::Combine { args, .. } => args.iter_mut().for_each(|a| substitute(a, parallel)),
    }
}
