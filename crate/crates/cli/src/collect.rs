//! Bus-to-metrics bridge: stores every `rate.*` and `path.*` report as
//! metric points.

use spmon_bus::{Client, ClientError, Event, Inbox};
use spmon_core::query::ingest::points_from_message;
use spmon_core::query::SharedMetrics;

pub const TOPICS: [&str; 2] = ["rate.", "path."];

/// Subscribes and ingests until the client disconnects. Malformed reports
/// are logged and skipped. Returns the number of points written.
pub async fn run_collector(client: &Client, inbox: &mut Inbox, metrics: SharedMetrics) -> Result<u64, ClientError> {
    for t in TOPICS {
        client.subscribe(t).await?;
    }
    let mut written = 0;
    loop {
        let ev = match inbox.recv().await {
            Ok(ev) => ev,
            Err(ClientError::Disconnected) => return Ok(written),
            Err(e) => return Err(e),
        };
        let Event::Publication { topic, data, .. } = ev else { continue };
        match points_from_message(&topic, &data) {
            Ok(points) => {
                let mut m = metrics.write().expect("metrics lock");
                for p in points {
                    match m.put(p) {
                        Ok(()) => written += 1,
                        Err(e) => tracing::warn!(%topic, error = %e, "point not stored"),
                    }
                }
            }
            Err(e) => tracing::warn!(%topic, error = %e, "skipping report"),
        }
    }
}
