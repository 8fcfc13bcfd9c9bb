//! Converts published monitor reports into metric points.

use crate::measure::{Quantity, Unit};
use crate::pathmon::LinkReport;
use crate::ratemon::RateReport;

use super::metrics::{tags, MetricPoint};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("topic {0:?} is neither rate.* nor path.*")]
    UnknownTopic(String),
    #[error("malformed report on {topic}: {detail}")]
    Malformed { topic: String, detail: String },
}

/// `rate_mu`, `rate_sigma2`, `rate_mean` (B/s), `rate_variance` and
/// `overload_risk`, tagged with the entity.
pub fn rate_points(r: &RateReport) -> Vec<MetricPoint> {
    let t = tags([("entity", r.entity.as_str())]);
    [
        ("rate_mu", r.mu, Unit::None),
        ("rate_sigma2", r.sigma2, Unit::None),
        ("rate_mean", r.m, Unit::Bps),
        ("rate_variance", r.v, Unit::None),
        ("overload_risk", r.risk, Unit::None),
    ]
    .into_iter()
    .map(|(m, v, u)| MetricPoint::new(m, t.clone(), r.ts, Quantity::new(v, u)))
    .collect()
}

/// `link_delay_mean` (s), `link_delay_variance` and `link_loss`, tagged with
/// the path id and the link index.
pub fn link_points(r: &LinkReport) -> Vec<MetricPoint> {
    let link = r.link.to_string();
    let t = tags([("path", r.path.as_str()), ("link", link.as_str())]);
    [
        ("link_delay_mean", r.delay_mean, Unit::S),
        ("link_delay_variance", r.delay_variance, Unit::None),
        ("link_loss", r.loss, Unit::None),
    ]
    .into_iter()
    .map(|(m, v, u)| MetricPoint::new(m, t.clone(), r.ts, Quantity::new(v, u)))
    .collect()
}

/// Decodes a JSON report received on `rate.*` or `path.*`.
pub fn points_from_message(topic: &str, data: &[u8]) -> Result<Vec<MetricPoint>, IngestError> {
    let malformed = |e: serde_json::Error| IngestError::Malformed { topic: topic.to_owned(), detail: e.to_string() };
    if topic.starts_with("rate.") {
        Ok(rate_points(&serde_json::from_slice(data).map_err(malformed)?))
    } else if topic.starts_with("path.") {
        Ok(link_points(&serde_json::from_slice(data).map_err(malformed)?))
    } else {
        Err(IngestError::UnknownTopic(topic.to_owned()))
    }
}
