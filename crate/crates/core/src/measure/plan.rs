//! Executable aggregation plan: ring buffers, ordered zone predicates and the
//! transition table.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ast::*;
use super::units::{function_dimension, Dimension, Unit};

/// Measurement id to MF-ID, the identity or topic of the producing monitor.
pub type MfBinding = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompileError {
    #[error("measurement {0:?} has no MF-ID binding")]
    UnboundMeasurement(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IngestError {
    #[error("no measurement is bound to MF-ID {0:?}")]
    UnknownMfId(String),
    #[error("MF-ID {mf_id:?} reported a {got:?} value for a {want:?} measurement")]
    UnitMismatch { mf_id: String, got: Dimension, want: Dimension },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("empty buffer")]
pub struct EmptyBuffer;

/// Result of a window aggregate over the newest samples of a buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Windowed {
    pub value: f64,
    /// Fewer than `n` samples were available.
    pub warmup: bool,
}

/// Aggregate over the most recent `min(n, len)` samples, oldest first.
pub fn window_aggregate(kind: AggKind, n: usize, buffer: &[f64]) -> Result<Windowed, EmptyBuffer> {
    if buffer.is_empty() || n == 0 {
        return Err(EmptyBuffer);
    }
    let take = n.min(buffer.len());
    let w = &buffer[buffer.len() - take..];
    Ok(Windowed { value: aggregate_slice(kind, w), warmup: take < n })
}

fn aggregate_slice(kind: AggKind, w: &[f64]) -> f64 {
    match kind {
        AggKind::Mean => w.iter().sum::<f64>() / w.len() as f64,
        AggKind::Sum => w.iter().sum(),
        AggKind::Max => w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        AggKind::Min => w.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActiveZone {
    Default,
    Named(String),
}

impl fmt::Display for ActiveZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActiveZone::Default => f.write_str("default"),
            ActiveZone::Named(z) => f.write_str(z),
        }
    }
}

/// A fired action, ready for dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub dest: String,
    pub trigger: Trigger,
    pub payload: Vec<Value>,
    pub ts: f64,
}

impl Notification {
    /// Topic the notification is mirrored to.
    pub fn topic(&self) -> String {
        format!("measure.notify.{}", self.dest)
    }

    /// Compact JSON array, e.g. `["Alert","m1",0.012]`.
    pub fn payload_json(&self) -> String {
        serde_json::to_string(&self.payload).expect("JSON values always serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub notifications: Vec<Notification>,
    /// `(from, to)` when this sample changed the active zone.
    pub changed: Option<(ActiveZone, ActiveZone)>,
    pub active: ActiveZone,
    /// The deciding predicate was computed from fewer samples than its window.
    pub warmup: bool,
}

/// A monitor result as carried on the bus: `{mf_id, value, unit, ts}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorResult {
    pub mf_id: String,
    pub value: f64,
    #[serde(default)]
    pub unit: String,
    pub ts: f64,
}

#[derive(Debug)]
struct Buffer {
    capacity: usize,
    samples: VecDeque<f64>,
    dimension: Option<Dimension>,
}

#[derive(Debug)]
pub struct AggregationPlan {
    program: Program,
    buffers: Vec<Buffer>,
    index: HashMap<String, usize>,
    by_mf: HashMap<String, Vec<usize>>,
    active: Option<usize>,
    dropped: u64,
}

pub fn compile(program: &Program, bindings: &MfBinding) -> Result<AggregationPlan, CompileError> {
    let mut buffers = Vec::new();
    let mut index = HashMap::new();
    let mut by_mf: HashMap<String, Vec<usize>> = HashMap::new();
    for m in &program.measurements {
        let mf = bindings.get(&m.id).ok_or_else(|| CompileError::UnboundMeasurement(m.id.clone()))?;
        let i = buffers.len();
        index.insert(m.id.clone(), i);
        by_mf.entry(mf.clone()).or_default().push(i);
        buffers.push(Buffer { capacity: 1, samples: VecDeque::new(), dimension: function_dimension(&m.function) });
    }
    for z in &program.zones {
        for (id, _) in z.aggregate.expr.refs() {
            let b = &mut buffers[index[id]];
            b.capacity = b.capacity.max(z.aggregate.window as usize);
        }
    }
    Ok(AggregationPlan { program: program.clone(), buffers, index, by_mf, active: None, dropped: 0 })
}

impl AggregationPlan {
    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn capacity(&self, measurement: &str) -> Option<usize> {
        self.index.get(measurement).map(|&i| self.buffers[i].capacity)
    }

    pub fn samples(&self, measurement: &str) -> Option<Vec<f64>> {
        self.index.get(measurement).map(|&i| self.buffers[i].samples.iter().copied().collect())
    }

    pub fn active(&self) -> ActiveZone {
        self.zone_ref(self.active)
    }

    /// Samples refused since compilation.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    fn zone_ref(&self, z: Option<usize>) -> ActiveZone {
        z.map_or(ActiveZone::Default, |i| ActiveZone::Named(self.program.zones[i].id.clone()))
    }

    pub fn ingest_result(&mut self, r: &MonitorResult) -> Result<IngestOutcome, IngestError> {
        let unit = r.unit.parse::<Unit>().unwrap_or(Unit::None);
        self.ingest(&r.mf_id, r.value, unit, r.ts)
    }

    /// Appends a sample and re-evaluates the zones.
    pub fn ingest(&mut self, mf_id: &str, value: f64, unit: Unit, ts: f64) -> Result<IngestOutcome, IngestError> {
        let Some(targets) = self.by_mf.get(mf_id) else {
            self.dropped += 1;
            return Err(IngestError::UnknownMfId(mf_id.to_owned()));
        };
        for &i in targets {
            if let Some(want) = self.buffers[i].dimension {
                if unit != Unit::None && !want.compatible(unit.dimension()) {
                    self.dropped += 1;
                    return Err(IngestError::UnitMismatch { mf_id: mf_id.to_owned(), got: unit.dimension(), want });
                }
            }
        }
        let v = unit.to_canonical(value);
        for &i in targets {
            let b = &mut self.buffers[i];
            if b.samples.len() == b.capacity {
                b.samples.pop_front();
            }
            b.samples.push_back(v);
        }

        let (next, warmup) = self.evaluate();
        let prev = self.active;
        self.active = next;
        let mut out = IngestOutcome {
            notifications: Vec::new(),
            changed: None,
            active: self.zone_ref(next),
            warmup,
        };
        if prev == next {
            return Ok(out);
        }
        out.changed = Some((self.zone_ref(prev), self.zone_ref(next)));
        let from = prev.map(|i| self.program.zones[i].id.as_str());
        let to = next.map(|i| self.program.zones[i].id.as_str());
        let fires = |t: &Trigger, entry: bool| match t {
            Trigger::Transition { from: f, to: d } => !entry && Some(f.as_str()) == from && Some(d.as_str()) == to,
            Trigger::Entry { to: d } => entry && Some(d.as_str()) == to,
        };
        for entry in [false, true] {
            for a in &self.program.actions {
                if fires(&a.trigger, entry) {
                    out.notifications.push(self.notification(a, ts));
                }
            }
        }
        Ok(out)
    }

    /// First zone whose predicate holds, with the warm-up flag of the
    /// deciding predicate.
    fn evaluate(&self) -> (Option<usize>, bool) {
        for (i, z) in self.program.zones.iter().enumerate() {
            let a = &z.aggregate;
            if let Some(w) = self.eval_aggregate(a.kind, a.window as usize, &a.expr) {
                if z.cmp.holds(w.value, z.threshold.canonical()) {
                    return (Some(i), w.warmup);
                }
            }
        }
        (None, false)
    }

    fn notification(&self, a: &ActionDecl, ts: f64) -> Notification {
        let Action::Notify { dest, payload } = &a.action;
        let payload = payload
            .iter()
            .map(|item| match item {
                PayloadItem::Text { value } => Value::String(value.clone()),
                PayloadItem::Expr { expr } => {
                    let n = expr.refs().iter().map(|(id, _)| self.buffers[self.index[*id]].capacity).max().unwrap_or(1);
                    self.eval_aggregate(AggKind::Mean, n, expr)
                        .and_then(|w| serde_json::Number::from_f64(w.value))
                        .map_or(Value::Null, Value::Number)
                }
            })
            .collect();
        Notification { dest: dest.clone(), trigger: a.trigger.clone(), payload, ts }
    }

    /// `None` when a referenced buffer is empty.
    ///
    /// Without combine nodes the expression is evaluated sample by sample on
    /// the newest aligned window and then aggregated. With combine nodes each
    /// reference is aggregated over its own window first and the results are
    /// combined as scalars.
    pub fn eval_aggregate(&self, kind: AggKind, n: usize, e: &MExpr) -> Option<Windowed> {
        if e.has_combine() {
            return self.eval_scalar(kind, n, e);
        }
        let refs = e.refs();
        let avail = refs.iter().map(|(id, _)| self.buffers[self.index[*id]].samples.len()).min()?;
        let take = avail.min(n);
        if take == 0 {
            return None;
        }
        let series: Vec<f64> = (0..take).map(|j| self.eval_point(e, take - j)).collect();
        Some(Windowed { value: aggregate_slice(kind, &series), warmup: take < n })
    }

    /// Value of `e` using the `back`-th newest sample of each buffer (1 = newest).
    fn eval_point(&self, e: &MExpr, back: usize) -> f64 {
        match e {
            MExpr::Ref { id, .. } => {
                let s = &self.buffers[self.index[id]].samples;
                s[s.len() - back]
            }
            MExpr::Add { lhs, rhs } => self.eval_point(lhs, back) + self.eval_point(rhs, back),
            MExpr::Sub { lhs, rhs } => self.eval_point(lhs, back) - self.eval_point(rhs, back),
            MExpr::Combine { op, args } => op.apply(args.iter().map(|a| self.eval_point(a, back))),
        }
    }

    fn eval_scalar(&self, kind: AggKind, n: usize, e: &MExpr) -> Option<Windowed> {
        let both = |l: Windowed, r: Windowed, v: f64| Windowed { value: v, warmup: l.warmup || r.warmup };
        match e {
            MExpr::Ref { id, .. } => {
                let s: Vec<f64> = self.buffers[self.index[id]].samples.iter().copied().collect();
                window_aggregate(kind, n, &s).ok()
            }
            MExpr::Add { lhs, rhs } => {
                let (l, r) = (self.eval_scalar(kind, n, lhs)?, self.eval_scalar(kind, n, rhs)?);
                Some(both(l, r, l.value + r.value))
            }
            MExpr::Sub { lhs, rhs } => {
                let (l, r) = (self.eval_scalar(kind, n, lhs)?, self.eval_scalar(kind, n, rhs)?);
                Some(both(l, r, l.value - r.value))
            }
            MExpr::Combine { op, args } => {
                let parts = args.iter().map(|a| self.eval_scalar(kind, n, a)).collect::<Option<Vec<_>>>()?;
                Some(Windowed {
                    value: op.apply(parts.iter().map(|w| w.value)),
                    warmup: parts.iter().any(|w| w.warmup),
                })
            }
        }
    }
}
