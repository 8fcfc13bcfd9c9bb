use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

/// Delay and loss model of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub gamma_shape: f64,
    /// Seconds.
    pub gamma_scale: f64,
    pub loss: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self { gamma_shape: 2.0, gamma_scale: 0.001, loss: 0.04 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// One entry per link; the path has `links.len() + 1` nodes.
    pub links: Vec<LinkParams>,
    /// Probability that a packet is picked as a measurement packet.
    pub alpha: f64,
    /// Log-space location and scale of packet inter-arrival times (seconds).
    pub interarrival: (f64, f64),
    pub packets: u64,
    pub seed: u64,
    /// Per-node clock offsets in seconds, all zero unless set.
    pub clock_offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("a path needs at least 3 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("loss must lie in [0, 1), got {0}")]
    Loss(f64),
    #[error("gamma parameters must be positive")]
    Gamma,
    #[error("inter-arrival scale must be non-negative and finite")]
    Interarrival,
    #[error("expected {want} clock offsets, got {got}")]
    Offsets { want: usize, got: usize },
}

impl SimConfig {
    /// `hops` nodes joined by identical links.
    pub fn new(hops: usize, link: LinkParams) -> Self {
        Self {
            links: vec![link; hops.saturating_sub(1)],
            alpha: 0.3,
            interarrival: ((1e-4f64).ln(), 0.5),
            packets: 100_000,
            seed: 7,
            clock_offsets: vec![0.0; hops],
        }
    }

    pub fn nodes(&self) -> usize {
        self.links.len() + 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes() < 3 {
            return Err(ConfigError::TooFewNodes(self.nodes()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        for l in &self.links {
            if !(0.0..1.0).contains(&l.loss) {
                return Err(ConfigError::Loss(l.loss));
            }
            if !(l.gamma_shape > 0.0 && l.gamma_scale > 0.0) {
                return Err(ConfigError::Gamma);
            }
        }
        if !(self.interarrival.1 >= 0.0 && self.interarrival.1.is_finite() && self.interarrival.0.is_finite()) {
            return Err(ConfigError::Interarrival);
        }
        if self.clock_offsets.len() != self.nodes() {
            return Err(ConfigError::Offsets { want: self.nodes(), got: self.clock_offsets.len() });
        }
        Ok(())
    }
}

impl Default for SimConfig {
    /// Six nodes, loss 0.04 on every link.
    fn default() -> Self {
        Self::new(6, LinkParams::default())
    }
}

/// Packets received and sent by one node, read over the whole session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounters {
    pub received: u64,
    pub sent: u64,
}

/// What the receiver learns from the mules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSampleSet {
    /// One record per measurement packet: cumulative delays `Y_1..Y_k` from
    /// the sender to each node the packet reached. `k` is the number of
    /// links, or less when the packet was lost on link `k + 1`.
    pub records: Vec<Vec<f64>>,
    pub counters: Vec<NodeCounters>,
}

impl PathSampleSet {
    pub fn links(&self) -> usize {
        self.counters.len() - 1
    }

    /// The records that reached the receiver.
    pub fn full_path_only(&self) -> PathSampleSet {
        let l = self.links();
        PathSampleSet {
            records: self.records.iter().filter(|r| r.len() == l).cloned().collect(),
            counters: self.counters.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTruth {
    pub mean: f64,
    pub variance: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub links: Vec<LinkTruth>,
}

impl GroundTruth {
    pub fn of(cfg: &SimConfig) -> Self {
        let links = cfg
            .links
            .iter()
            .map(|l| LinkTruth {
                mean: l.gamma_shape * l.gamma_scale,
                variance: l.gamma_shape * l.gamma_scale * l.gamma_scale,
                loss: l.loss,
            })
            .collect();
        Self { links }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub samples: PathSampleSet,
    pub truth: GroundTruth,
}

/// Sends `packets` packets down the path. Mules are lossless: every hop a
/// measurement packet completed is reported to the receiver.
pub fn simulate(cfg: &SimConfig) -> Result<SimRun, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gap = LogNormal::new(cfg.interarrival.0, cfg.interarrival.1).map_err(|_| ConfigError::Interarrival)?;
    let delays: Vec<Gamma<f64>> = cfg
        .links
        .iter()
        .map(|l| Gamma::new(l.gamma_shape, l.gamma_scale).map_err(|_| ConfigError::Gamma))
        .collect::<Result<_, _>>()?;

    let mut counters = vec![NodeCounters::default(); cfg.nodes()];
    let mut records = Vec::new();
    let mut t = 0.0f64;
    let off = &cfg.clock_offsets;
    for _ in 0..cfg.packets {
        t += gap.sample(&mut rng);
        let measured = rng.random_bool(cfg.alpha);
        let mut trail = Vec::new();
        let mut at = t;
        counters[0].sent += 1;
        for (i, link) in cfg.links.iter().enumerate() {
            if rng.random_bool(link.loss) {
                break;
            }
            at += delays[i].sample(&mut rng);
            let node = i + 1;
            counters[node].received += 1;
            if node < cfg.links.len() {
                counters[node].sent += 1;
            }
            if measured {
                trail.push((at + off[node]) - (t + off[0]));
            }
        }
        if measured {
            records.push(trail);
        }
    }
    Ok(SimRun { samples: PathSampleSet { records, counters }, truth: GroundTruth::of(cfg) })
}
