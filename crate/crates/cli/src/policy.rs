//! Message-level policy guard on the traffic-assignment channel.

use serde::{Deserialize, Serialize};

/// `flow` may only ever be carried by `link`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pin {
    pub rule: String,
    pub flow: String,
    pub link: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub pins: Vec<Pin>,
}

impl Policy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pin(mut self, rule: &str, flow: &str, link: &str) -> Self {
        self.pins.push(Pin { rule: rule.into(), flow: flow.into(), link: link.into() });
        self
    }

    pub fn pinned(&self, flow: &str) -> Option<&Pin> {
        self.pins.iter().find(|p| p.flow == flow)
    }
}

/// A request to carry `flow` on link `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reroute {
    pub flow: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Block { rule: String, reason: String },
}

/// Published on [`ALARM_TOPIC`] for every blocked request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub flow: String,
    pub rule: String,
    pub link: String,
    pub ts: f64,
}

pub const ALARM_TOPIC: &str = "alarm.policy";

pub fn policy_guard(req: &Reroute, policy: &Policy) -> Verdict {
    match policy.pinned(&req.flow) {
        Some(pin) if pin.link != req.to => Verdict::Block {
            rule: pin.rule.clone(),
            reason: format!("{} is pinned to {}", req.flow, pin.link),
        },
        _ => Verdict::Allow,
    }
}
