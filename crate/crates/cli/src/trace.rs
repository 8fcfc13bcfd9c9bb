//! Demo event trace: one JSON object per line, fields in a fixed order
//! (`ts`, `round`, `step`, `source`, `event`, then the event's own fields).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Scenario time in seconds.
    pub ts: f64,
    /// Lockstep round the event belongs to.
    pub round: u64,
    /// Causal distance from the round's first message.
    pub step: u32,
    pub source: String,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TraceEvent {
    FlowArrival { flow: String, demand: f64 },
    /// An assignment the links actually applied.
    Assign { flow: String, link: String },
    RiskReport { link: String, risk: f64, state: String },
    ZoneTransition { link: String, from: String, to: String },
    RerouteRequest { flow: String, from: String, to: String },
    PolicyBlock { flow: String, to: String, rule: String },
    Alarm { flow: String, rule: String, link: String },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::FlowArrival { .. } => "flow-arrival",
            TraceEvent::Assign { .. } => "assign",
            TraceEvent::RiskReport { .. } => "risk-report",
            TraceEvent::ZoneTransition { .. } => "zone-transition",
            TraceEvent::RerouteRequest { .. } => "reroute-request",
            TraceEvent::PolicyBlock { .. } => "policy-block",
            TraceEvent::Alarm { .. } => "alarm",
        }
    }

    /// Link the event is about, used to order concurrent events.
    pub(crate) fn link(&self) -> &str {
        match self {
            TraceEvent::Assign { link, .. }
            | TraceEvent::RiskReport { link, .. }
            | TraceEvent::ZoneTransition { link, .. }
            | TraceEvent::Alarm { link, .. } => link,
            TraceEvent::RerouteRequest { to, .. } | TraceEvent::PolicyBlock { to, .. } => to,
            TraceEvent::FlowArrival { .. } => "",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub records: Vec<TraceRecord>,
}

impl EventTrace {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> serde_json::Result<Self> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn count(&self, kind: &str) -> usize {
        self.records.iter().filter(|r| r.event.kind() == kind).count()
    }

    /// Link each flow was last assigned to.
    pub fn final_assignment(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            if let TraceEvent::Assign { flow, link } = &r.event {
                out.insert(flow.clone(), link.clone());
            }
        }
        out
    }

    /// Descriptions of every violated trace invariant; empty when all hold.
    pub fn violations(&self, policy: &Policy) -> Vec<String> {
        let mut out = Vec::new();
        let mut transitioned: Vec<&str> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match &r.event {
                TraceEvent::Assign { flow, link } => {
                    if let Some(pin) = policy.pinned(flow).filter(|p| &p.link != link) {
                        out.push(format!("record {i}: {flow} applied on {link} against {}", pin.rule));
                    }
                }
                TraceEvent::ZoneTransition { link, .. } => transitioned.push(link),
                TraceEvent::RerouteRequest { flow, from, .. }
                    if !transitioned.contains(&from.as_str()) => {
                        out.push(format!("record {i}: reroute of {flow} without a prior zone transition on {from}"));
                    }
                _ => {}
            }
        }
        out
    }
}
