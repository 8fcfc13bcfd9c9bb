//! Randomized broker-tree workloads checked against a brute-force oracle.
//!
//! A workload builds a random tree of brokers on the in-memory [`Fabric`],
//! registers clients, installs random subscriptions, then issues a random mix
//! of sends and publications. The oracle computes the expected recipients from
//! the static topology alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sim::{ClientEvent, Fabric};

#[derive(Debug, Clone, Copy)]
pub struct WorkloadSpec {
    pub max_brokers: usize,
    pub max_clients: usize,
    pub ops: usize,
    /// Operations issued between quiescence points.
    pub batch: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self { max_brokers: 5, max_clients: 20, ops: 10_000, batch: 64 }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct WorkloadReport {
    pub brokers: usize,
    pub clients: usize,
    pub sends: usize,
    pub publishes: usize,
    pub expected_deliveries: usize,
    pub delivered: usize,
    pub duplicates: usize,
    pub losses: usize,
    pub misdelivered: usize,
    pub fifo_violations: usize,
    pub no_route_expected: usize,
    pub no_route_seen: usize,
}

impl WorkloadReport {
    pub fn is_clean(&self) -> bool {
        self.duplicates == 0
            && self.losses == 0
            && self.misdelivered == 0
            && self.fifo_violations == 0
            && self.delivered == self.expected_deliveries
            && self.no_route_seen == self.no_route_expected
    }
}

const PREFIXES: &[&str] = &["", "a", "ab", "abc", "b", "ba", "risk.", "risk.l1", "perf", "perf.l"];
const TOPICS: &[&str] = &["a", "ab", "abcd", "b", "bab", "risk.l1", "risk.l2", "perf.link1", "perf", "zzz"];

/// Message key: (kind, sender, sequence).
type Key = (u8, usize, u64);

fn payload(kind: u8, sender: usize, seq: u64) -> Bytes {
    let mut v = Vec::with_capacity(17);
    v.push(kind);
    v.extend_from_slice(&(sender as u64).to_be_bytes());
    v.extend_from_slice(&seq.to_be_bytes());
    Bytes::from(v)
}

fn parse_payload(data: &[u8]) -> Key {
    let sender = u64::from_be_bytes(data[1..9].try_into().unwrap()) as usize;
    let seq = u64::from_be_bytes(data[9..17].try_into().unwrap());
    (data[0], sender, seq)
}

pub fn run_workload(seed: u64, spec: WorkloadSpec) -> WorkloadReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fabric = Fabric::new(seed ^ 0x9e37_79b9_7f4a_7c15);

    let n_brokers = rng.random_range(1..=spec.max_brokers);
    for b in 0..n_brokers {
        fabric.add_broker(&format!("b{b}"));
    }
    for b in 1..n_brokers {
        let parent = rng.random_range(0..b);
        fabric.connect_broker(b, parent);
    }
    fabric.run_until_quiet();

    let n_clients = rng.random_range(2..=spec.max_clients);
    let mut names = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let c = fabric.add_client(rng.random_range(0..n_brokers));
        debug_assert_eq!(c, i);
        // Roughly one client in eight tries to steal an earlier name.
        let name = if i > 0 && rng.random_ratio(1, 8) {
            names[rng.random_range(0..i)]
        } else {
            i
        };
        names.push(name);
        fabric.register(c, &format!("c{name}"));
    }
    fabric.run_until_quiet();

    let mut registered: BTreeMap<usize, String> = BTreeMap::new();
    for c in 0..n_clients {
        let events = fabric.take_events(c);
        if events.contains(&ClientEvent::Registered) {
            registered.insert(c, format!("c{}", names[c]));
        }
    }
    let by_name: HashMap<String, usize> = registered.iter().map(|(c, n)| (n.clone(), *c)).collect();
    assert_eq!(by_name.len(), registered.len(), "name registered twice");

    let mut subs: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for &c in registered.keys() {
        for _ in 0..rng.random_range(0..3) {
            let p = PREFIXES[rng.random_range(0..PREFIXES.len())];
            subs.entry(c).or_default().insert(p);
            fabric.subscribe(c, p);
        }
    }
    fabric.run_until_quiet();

    let senders: Vec<usize> = registered.keys().copied().collect();
    let mut report = WorkloadReport { brokers: n_brokers, clients: n_clients, ..Default::default() };
    // Expected multiset of (receiver, key) and the source name each must carry.
    let mut expected: HashMap<(usize, Key), u32> = HashMap::new();
    // Per (kind, sender, receiver) the sequence numbers in send order.
    let mut sent_order: HashMap<(u8, usize, usize), Vec<u64>> = HashMap::new();
    let mut received: HashMap<(usize, Key), u32> = HashMap::new();
    let mut recv_order: HashMap<(u8, usize, usize), Vec<u64>> = HashMap::new();
    let mut seq = 0u64;

    let mut done = 0;
    while done < spec.ops {
        let batch = spec.batch.min(spec.ops - done);
        for _ in 0..batch {
            seq += 1;
            let s = senders[rng.random_range(0..senders.len())];
            match rng.random_range(0..10) {
                0 => {
                    report.sends += 1;
                    report.no_route_expected += 1;
                    fabric.send(s, "ghost", payload(0, s, seq));
                }
                1..=6 => {
                    report.sends += 1;
                    let d = senders[rng.random_range(0..senders.len())];
                    fabric.send(s, &registered[&d], payload(0, s, seq));
                    *expected.entry((d, (0, s, seq))).or_default() += 1;
                    sent_order.entry((0, s, d)).or_default().push(seq);
                    report.expected_deliveries += 1;
                }
                _ => {
                    report.publishes += 1;
                    let topic = TOPICS[rng.random_range(0..TOPICS.len())];
                    fabric.publish(s, topic, payload(1, s, seq));
                    for (&c, prefixes) in &subs {
                        if prefixes.iter().any(|p| topic.starts_with(p)) {
                            *expected.entry((c, (1, s, seq))).or_default() += 1;
                            sent_order.entry((1, s, c)).or_default().push(seq);
                            report.expected_deliveries += 1;
                        }
                    }
                }
            }
        }
        done += batch;
        fabric.run_until_quiet();
        for c in 0..n_clients {
            for ev in fabric.take_events(c) {
                match ev {
                    ClientEvent::Direct { src, data } | ClientEvent::Publication { src, data, .. } => {
                        let key = parse_payload(&data);
                        if registered.get(&key.1) != Some(&src) {
                            report.misdelivered += 1;
                        }
                        *received.entry((c, key)).or_default() += 1;
                        recv_order.entry((key.0, key.1, c)).or_default().push(key.2);
                    }
                    ClientEvent::NoRoute { dest } => {
                        if dest == "ghost" {
                            report.no_route_seen += 1;
                        } else {
                            report.misdelivered += 1;
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    for (key, &want) in &expected {
        let got = received.get(key).copied().unwrap_or(0);
        if got < want {
            report.losses += (want - got) as usize;
        }
    }
    for (key, &got) in &received {
        report.delivered += got as usize;
        match expected.get(key) {
            Some(&want) if got > want => report.duplicates += (got - want) as usize,
            Some(_) => {}
            None => report.misdelivered += got as usize,
        }
    }
    for (pair, order) in &recv_order {
        if sent_order.get(pair) != Some(order) {
            report.fifo_violations += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_workloads_are_clean() {
        for seed in 0..20 {
            let r = run_workload(seed, WorkloadSpec { ops: 500, ..Default::default() });
            assert!(r.is_clean(), "seed {seed}: {r:?}");
        }
    }
}
