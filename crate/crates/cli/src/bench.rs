//! Broker throughput and one-way latency between a co-located sender and
//! receiver, so both timestamps come from one clock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use spmon_bus::{connect, ClientError, ClientOptions, Endpoint, Event};
use tokio::sync::oneshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub size: usize,
    pub duration: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub size: usize,
    pub messages: u64,
    pub seconds: f64,
    pub msgs_per_sec: f64,
    /// Payload bytes per second.
    pub goodput: f64,
    /// One-way latency in microseconds; absent for payloads too short to
    /// carry a timestamp.
    pub latency_us: Option<Percentiles>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("broker unavailable: {0}")]
    BrokerUnavailable(ClientError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("receiver task failed")]
    Receiver,
}

/// Messages in flight before the sender waits for an acknowledgement: about
/// 8 MiB of payload, between 16 and 4096 messages.
fn window(size: usize) -> u64 {
    ((8 << 20) / size.max(1)).clamp(16, 4096) as u64
}

fn percentiles(mut v: Vec<f64>) -> Option<Percentiles> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    Some(Percentiles { p50: at(0.5), p90: at(0.9), p99: at(0.99), max: v[v.len() - 1] })
}

pub async fn bench_broker(ep: &Endpoint, cfg: BenchConfig) -> Result<BenchReport, BenchError> {
    static RUNS: AtomicU64 = AtomicU64::new(0);
    let tag = format!("{}-{}", std::process::id(), RUNS.fetch_add(1, Ordering::Relaxed));
    let (tx_name, rx_name) = (format!("bench-tx-{tag}"), format!("bench-rx-{tag}"));
    let open = |name: String| async move {
        connect(ClientOptions::new(ep.clone(), name)).await.map_err(|e| match e {
            ClientError::ConnectFailed(_) | ClientError::Timeout(_) => BenchError::BrokerUnavailable(e),
            other => BenchError::Client(other),
        })
    };
    let (tx, mut tx_inbox) = open(tx_name.clone()).await?;
    let (rx, mut rx_inbox) = open(rx_name.clone()).await?;
    let base = Instant::now();
    let ack_every = (window(cfg.size) / 4).max(1);

    let (stop_tx, mut stop_rx) = oneshot::channel::<()>();
    let receiver = tokio::spawn(async move {
        let mut latencies = Vec::new();
        let (mut count, mut acked) = (0u64, 0u64);
        loop {
            let ev = match rx_inbox.try_recv() {
                Some(ev) => ev,
                None => {
                    if count > acked {
                        rx.send(&tx_name, Bytes::copy_from_slice(&count.to_be_bytes())).await?;
                        acked = count;
                    }
                    tokio::select! {
                        ev = rx_inbox.recv() => ev?,
                        _ = &mut stop_rx => break,
                    }
                }
            };
            let Event::Direct { data, .. } = ev else { continue };
            count += 1;
            if data.len() >= 8 {
                let sent = u64::from_be_bytes(data[..8].try_into().expect("eight bytes"));
                let now = base.elapsed().as_nanos() as u64;
                latencies.push(now.saturating_sub(sent) as f64 / 1000.0);
            }
            if count - acked >= ack_every {
                rx.send(&tx_name, Bytes::copy_from_slice(&count.to_be_bytes())).await?;
                acked = count;
            }
        }
        rx.close().await;
        Ok::<_, ClientError>(latencies)
    });

    let win = window(cfg.size);
    let template = vec![0u8; cfg.size];
    let (mut sent, mut acked) = (0u64, 0u64);
    let start = Instant::now();
    while start.elapsed() < cfg.duration {
        while sent - acked >= win {
            if let Event::Direct { data, .. } = tx_inbox.recv().await? {
                acked = acked.max(u64::from_be_bytes(data[..8].try_into().expect("eight bytes")));
            }
        }
        let mut payload = template.clone();
        if payload.len() >= 8 {
            payload[..8].copy_from_slice(&(base.elapsed().as_nanos() as u64).to_be_bytes());
        }
        tx.send(&rx_name, payload).await?;
        sent += 1;
    }
    while acked < sent {
        if let Event::Direct { data, .. } = tx_inbox.recv().await? {
            acked = acked.max(u64::from_be_bytes(data[..8].try_into().expect("eight bytes")));
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let _ = stop_tx.send(());
    let latencies = receiver.await.map_err(|_| BenchError::Receiver)??;
    tx.close().await;
    Ok(BenchReport {
        size: cfg.size,
        messages: sent,
        seconds,
        msgs_per_sec: sent as f64 / seconds,
        goodput: (sent * cfg.size as u64) as f64 / seconds,
        latency_us: percentiles(latencies),
    })
}
