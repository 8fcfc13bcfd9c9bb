//! Embedded time-series store standing in for the monitoring database.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::measure::{Quantity, Unit};

pub type Tags = BTreeMap<String, String>;

pub fn tags<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Tags {
    pairs.into_iter().map(|(k, v)| (k.to_owned(), v.to_owned())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub metric: String,
    #[serde(default)]
    pub tags: Tags,
    pub ts: f64,
    pub value: f64,
    #[serde(default = "no_unit")]
    pub unit: Unit,
}

fn no_unit() -> Unit {
    Unit::None
}

impl MetricPoint {
    pub fn new(metric: impl Into<String>, tags: Tags, ts: f64, q: Quantity) -> Self {
        Self { metric: metric.into(), tags, ts, value: q.value, unit: q.unit }
    }

    pub fn quantity(&self) -> Quantity {
        Quantity::new(self.value, self.unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agg {
    Latest,
    #[default]
    Mean,
    Max,
    Sum,
}

impl FromStr for Agg {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "latest" => Agg::Latest,
            "mean" => Agg::Mean,
            "max" => Agg::Max,
            "sum" => Agg::Sum,
            _ => return Err(MetricsError::BadAggregate(s.to_owned())),
        })
    }
}

/// Time window and aggregate of a query. The window is `[end - span, end]`;
/// `end` defaults to the newest matching point and `span: None` keeps the
/// whole series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryOptions {
    pub span: Option<f64>,
    pub end: Option<f64>,
    pub agg: Agg,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self { span: Some(60.0), end: None, agg: Agg::Mean }
    }
}

impl QueryOptions {
    pub fn all(agg: Agg) -> Self {
        Self { span: None, end: None, agg }
    }

    pub fn with_agg(self, agg: Agg) -> Self {
        Self { agg, ..self }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("unknown aggregate {0:?} (expected latest, mean, max or sum)")]
    BadAggregate(String),
    #[error("metric point has a non-finite timestamp or value")]
    NonFinite,
    #[error("line {line}: {detail}")]
    Record { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Series = BTreeMap<OrderedFloat<f64>, Quantity>;

/// Points keyed by (metric, tags, timestamp); a later write to the same key
/// replaces the earlier one. Optionally mirrored to an append-only
/// newline-delimited JSON log.
#[derive(Debug, Default)]
pub struct MetricsStore {
    series: BTreeMap<String, BTreeMap<Tags, Series>>,
    log: Option<File>,
}

pub(crate) static EMPTY_METRICS: MetricsStore = MetricsStore { series: BTreeMap::new(), log: None };

/// One writer and many readers; a read lock is a consistent snapshot.
pub type SharedMetrics = Arc<RwLock<MetricsStore>>;

impl MetricsStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replays the log at `path` (if present) and appends later writes to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let mut s = if path.exists() { Self::load(path)? } else { Self::new() };
        s.log = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(s)
    }

    /// Reads a log without attaching to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let mut s = Self::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: MetricPoint =
                serde_json::from_str(&line).map_err(|e| MetricsError::Record { line: i + 1, detail: e.to_string() })?;
            s.insert(p).map_err(|e| MetricsError::Record { line: i + 1, detail: e.to_string() })?;
        }
        Ok(s)
    }

    pub fn put(&mut self, p: MetricPoint) -> Result<(), MetricsError> {
        if !(p.ts.is_finite() && p.value.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        if let Some(log) = &mut self.log {
            let mut line = serde_json::to_string(&p).expect("points serialize");
            line.push('\n');
            log.write_all(line.as_bytes())?;
        }
        self.insert(p)
    }

    fn insert(&mut self, p: MetricPoint) -> Result<(), MetricsError> {
        if !(p.ts.is_finite() && p.value.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        let q = p.quantity();
        self.series.entry(p.metric).or_default().entry(p.tags).or_default().insert(OrderedFloat(p.ts), q);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.series.values().flat_map(BTreeMap::values).map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metrics(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    /// Every stored point, ordered by metric, tags and timestamp.
    pub fn points(&self) -> impl Iterator<Item = MetricPoint> + '_ {
        self.series.iter().flat_map(|(m, by_tags)| {
            by_tags.iter().flat_map(move |(t, s)| {
                s.iter().map(move |(ts, q)| MetricPoint::new(m.clone(), t.clone(), ts.0, *q))
            })
        })
    }

    /// Points of the series with exactly these tags inside the window, oldest
    /// first. Empty when the tags match nothing.
    pub fn select(&self, metric: &str, tags: &Tags, opts: &QueryOptions) -> Result<Vec<(f64, Quantity)>, MetricsError> {
        let by_tags = self.series.get(metric).ok_or_else(|| MetricsError::UnknownMetric(metric.to_owned()))?;
        let Some(series) = by_tags.get(tags) else {
            return Ok(Vec::new());
        };
        let Some(newest) = series.keys().next_back() else {
            return Ok(Vec::new());
        };
        let end = opts.end.map_or(*newest, OrderedFloat);
        let start = opts.span.map_or(OrderedFloat(f64::NEG_INFINITY), |s| OrderedFloat(end.0 - s));
        Ok(series.range(start..=end).map(|(t, q)| (t.0, *q)).collect())
    }

    /// Aggregate over [`MetricsStore::select`]; `None` when no point matches.
    pub fn query(&self, metric: &str, tags: &Tags, opts: &QueryOptions) -> Result<Option<Quantity>, MetricsError> {
        Ok(aggregate(&self.select(metric, tags, opts)?, opts.agg))
    }
}

/// Values sharing one unit are aggregated as stored; mixed units are
/// converted to the canonical unit first.
pub fn aggregate(points: &[(f64, Quantity)], agg: Agg) -> Option<Quantity> {
    let (_, first) = points.first()?;
    let unit = if points.iter().all(|(_, q)| q.unit == first.unit) { first.unit } else { first.unit.dimension().canonical_unit() };
    let mut values = points.iter().map(|(_, q)| if q.unit == unit { q.value } else { q.canonical() });
    let value = match agg {
        Agg::Latest => values.next_back().expect("non-empty"),
        Agg::Mean => values.sum::<f64>() / points.len() as f64,
        Agg::Max => values.fold(f64::NEG_INFINITY, f64::max),
        Agg::Sum => values.sum(),
    };
    Some(Quantity::new(value, unit))
}
