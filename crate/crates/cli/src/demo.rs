//! Integrated scenario: two synthetic links, three flows, one rate monitor
//! per link feeding a MEASURE aggregation point, a load balancer, and the
//! policy guard between the balancer and the links.
//!
//! Every component is its own event loop with its own bus client. A driver
//! advances the scenario in lockstep rounds: it sends a round's first
//! messages and waits until the round has quiesced before starting the next.
//! Quiescence uses weight throwing. Each message carries a share of a fixed
//! total weight; a handler splits its share among the messages it emits and
//! hands the remainder back to the driver, so the driver holds the full
//! total again exactly when nothing of the round is in flight.
//!
//! Trace records are published to a subscriber and sorted by
//! `(round, step, source, link, index)`, all of which are independent of how
//! the bus interleaved concurrent deliveries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use bytes::Bytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spmon_bus::{connect, spawn_broker, BrokerHandle, BrokerOptions, Client, ClientError, ClientOptions, Endpoint, Event, Inbox};
use spmon_core::measure::{self, AggregationPlan, MfBinding, Unit};
use spmon_core::ratemon::{fit, MomentWindow, RateReport, RiskDetector, RiskState};

use crate::policy::{policy_guard, Alarm, Policy, Reroute, Verdict, ALARM_TOPIC};
use crate::trace::{EventTrace, TraceEvent, TraceRecord};

pub const PRIMARY: &str = "primary";
pub const SECONDARY: &str = "secondary";

const DRIVER: &str = "driver";
const LINKS: &str = "links";
const AGG: &str = "agg1";
const BALANCER: &str = "balancer";
const GUARD: &str = "guard";
const TRACER: &str = "tracer";

const TOTAL_WEIGHT: u64 = 1 << 62;
const ROUND_TIMEOUT: Duration = Duration::from_secs(20);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    /// Bytes per second.
    pub capacity: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub name: String,
    pub arrival_tick: u64,
    /// Mean rate as a fraction of the primary link's capacity.
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoScenario {
    /// `links[0]` is the primary link, `links[1]` the secondary.
    pub links: Vec<LinkSpec>,
    pub flows: Vec<FlowSpec>,
    pub policy: Policy,
    /// Per-link background load, as a fraction of capacity.
    pub background: f64,
    /// Scales every flow's demand and the background.
    pub intensity: f64,
    /// Coefficient of variation of every per-interval rate.
    pub cv: f64,
    pub threshold: f64,
    /// Consecutive reports a zone needs before it is entered.
    pub k: u32,
    pub dt_ms: u64,
    pub report_every: u32,
    pub ticks: u64,
    /// The balancer ignores the pin policy.
    pub buggy: bool,
    pub seed: u64,
}

impl DemoScenario {
    pub fn new(seed: u64) -> Self {
        let flow = |i: u64| FlowSpec { name: format!("flow{i}"), arrival_tick: (i - 1) * 100, demand: 0.45 };
        Self {
            links: vec![
                LinkSpec { name: PRIMARY.into(), capacity: 1.25e8, latency_ms: 2.0 },
                LinkSpec { name: SECONDARY.into(), capacity: 1.25e8, latency_ms: 8.0 },
            ],
            flows: (1..=3).map(flow).collect(),
            policy: Policy::new().pin("P1", "flow3", PRIMARY),
            background: 0.05,
            intensity: 1.0,
            cv: 0.15,
            threshold: RiskDetector::DEFAULT_THRESHOLD,
            k: RiskDetector::DEFAULT_K,
            dt_ms: 300,
            report_every: 10,
            ticks: 300,
            buggy: true,
            seed,
        }
    }

    /// Traffic scaled to a tenth.
    pub fn calm(mut self) -> Self {
        self.intensity = 0.1;
        self
    }

    fn ts(&self, tick: u64) -> f64 {
        (tick * self.dt_ms) as f64 / 1000.0
    }

    fn primary(&self) -> &str {
        &self.links[0].name
    }

    fn secondary(&self) -> &str {
        &self.links[1].name
    }

    /// The aggregation point's program for one link.
    pub fn program(&self, link: &str) -> String {
        let (k, t) = (self.k, self.threshold);
        format!(
            "measurements {{\n    r = risk({link});\n}}\n\
             zones {{\n    hot = min({k}, r) > {t};\n    calm = max({k}, r) <= {t};\n}}\n\
             actions {{\n    -> hot = Notify({BALANCER}, [\"Alert\", \"{link}\", r]);\n    \
             -> calm = Notify({BALANCER}, [\"OK\", \"{link}\", r]);\n}}\n"
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("broker unavailable: {0}")]
    BrokerUnavailable(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("round {0} did not quiesce")]
    Stalled(u64),
    #[error("bad message: {0}")]
    Codec(#[from] serde_json::Error),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("component {0} failed")]
    Component(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope {
    round: u64,
    step: u32,
    ts: f64,
    weight: u64,
    body: Body,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Body {
    Arrive { flow: String, demand: f64 },
    Tick { tick: u64 },
    Sample { link: String, bytes: f64 },
    Report { link: String, report: RateReport },
    Notify { link: String, payload: Vec<Value> },
    Request { flow: String, to: String },
    Verdict { flow: String, to: String, allowed: bool },
    Assign { flow: String, link: String },
    Trace { record: TraceRecord, index: u32 },
    Done,
    Stop,
}

fn split(w: &mut u64) -> u64 {
    assert!(*w >= 2, "weight exhausted");
    let half = *w / 2;
    *w -= half;
    half
}

/// What a handler wants sent after it returns.
#[derive(Default)]
struct Out {
    sends: Vec<(String, Body)>,
    publishes: Vec<(String, Vec<u8>)>,
    traces: Vec<TraceEvent>,
}

impl Out {
    fn send(&mut self, dest: &str, body: Body) {
        self.sends.push((dest.to_owned(), body));
    }
}

trait Component: Send + 'static {
    fn handle(&mut self, env: &Envelope, out: &mut Out);
}

async fn run_component(name: String, client: Client, mut inbox: Inbox, mut comp: impl Component) -> Result<(), DemoError> {
    loop {
        let Event::Direct { data, .. } = inbox.recv().await? else { continue };
        let env: Envelope = serde_json::from_slice(&data)?;
        if matches!(env.body, Body::Stop) {
            client.close().await;
            return Ok(());
        }
        let mut out = Out::default();
        comp.handle(&env, &mut out);
        let mut w = env.weight;
        // Unweighted publications first: the tracer pairs an alarm with the
        // trace record that follows it from the same sender.
        for (topic, data) in out.publishes {
            client.publish(&topic, data).await?;
        }
        for (index, event) in out.traces.into_iter().enumerate() {
            let record = TraceRecord { ts: env.ts, round: env.round, step: env.step, source: name.clone(), event };
            let e = Envelope { weight: split(&mut w), body: Body::Trace { record, index: index as u32 }, ..env.clone() };
            client.publish(&format!("trace.{name}"), serde_json::to_vec(&e)?).await?;
        }
        for (dest, body) in out.sends {
            let e = Envelope { step: env.step + 1, weight: split(&mut w), body, ..env.clone() };
            client.send(&dest, serde_json::to_vec(&e)?).await?;
        }
        let done = Envelope { weight: w, body: Body::Done, ..env };
        client.send(DRIVER, serde_json::to_vec(&done)?).await?;
    }
}

struct Links {
    rng: ChaCha8Rng,
    /// Background first (one per link), then one per flow, in scenario order.
    sources: Vec<LogNormal<f64>>,
    flows: Vec<String>,
    link_names: Vec<String>,
    assigned: HashMap<String, String>,
    dt: f64,
}

impl Links {
    fn new(s: &DemoScenario) -> Result<Self, DemoError> {
        let c = s.links[0].capacity;
        let dist = |mean: f64| LogNormal::from_mean_cv(mean, s.cv).map_err(|e| DemoError::Scenario(e.to_string()));
        let mut sources = Vec::new();
        for l in &s.links {
            sources.push(dist(s.background * s.intensity * l.capacity)?);
        }
        for f in &s.flows {
            sources.push(dist(f.demand * s.intensity * c)?);
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(s.seed),
            sources,
            flows: s.flows.iter().map(|f| f.name.clone()).collect(),
            link_names: s.links.iter().map(|l| l.name.clone()).collect(),
            assigned: HashMap::new(),
            dt: s.dt_ms as f64 / 1000.0,
        })
    }
}

impl Component for Links {
    fn handle(&mut self, env: &Envelope, out: &mut Out) {
        match &env.body {
            Body::Assign { flow, link } => {
                self.assigned.insert(flow.clone(), link.clone());
                out.traces.push(TraceEvent::Assign { flow: flow.clone(), link: link.clone() });
            }
            Body::Tick { .. } => {
                // Every source is drawn every tick so the random stream does
                // not depend on the assignment.
                let draws: Vec<f64> = self.sources.iter().map(|d| d.sample(&mut self.rng)).collect();
                let nl = self.link_names.len();
                for (i, link) in self.link_names.iter().enumerate() {
                    let mut rate = draws[i];
                    for (j, flow) in self.flows.iter().enumerate() {
                        if self.assigned.get(flow) == Some(link) {
                            rate += draws[nl + j];
                        }
                    }
                    out.send(&ratemon_name(link), Body::Sample { link: link.clone(), bytes: rate * self.dt });
                }
            }
            _ => {}
        }
    }
}

fn ratemon_name(link: &str) -> String {
    format!("ratemon-{link}")
}

struct RateMon {
    window: MomentWindow,
    detector: RiskDetector,
    report_every: u32,
}

impl Component for RateMon {
    fn handle(&mut self, env: &Envelope, out: &mut Out) {
        let Body::Sample { link, bytes } = &env.body else { return };
        self.window.observe(*bytes);
        if self.window.n() < self.report_every as u64 {
            return;
        }
        let fitted = fit(&self.window);
        self.window.reset();
        let Ok(p) = fitted else { return };
        let (risk, _) = self.detector.tick_params(&p);
        let report = RateReport::new(link.clone(), &p, risk, env.ts);
        out.publishes.push((report.topic(), serde_json::to_vec(&report).expect("reports serialize")));
        let state = match self.detector.state() {
            RiskState::Calm => "calm",
            RiskState::Congested => "congested",
        };
        out.traces.push(TraceEvent::RiskReport { link: link.clone(), risk, state: state.into() });
        out.send(AGG, Body::Report { link: link.clone(), report });
    }
}

struct Aggregator {
    plans: BTreeMap<String, AggregationPlan>,
}

impl Component for Aggregator {
    fn handle(&mut self, env: &Envelope, out: &mut Out) {
        let Body::Report { link, report } = &env.body else { return };
        let Some(plan) = self.plans.get_mut(link) else { return };
        let Ok(o) = plan.ingest(&ratemon_name(link), report.risk, Unit::None, env.ts) else { return };
        if let Some((from, to)) = o.changed {
            out.traces.push(TraceEvent::ZoneTransition { link: link.clone(), from: from.to_string(), to: to.to_string() });
        }
        for n in o.notifications {
            out.send(&n.dest, Body::Notify { link: link.clone(), payload: n.payload });
        }
    }
}

struct Balancer {
    primary: String,
    secondary: String,
    buggy: bool,
    policy: Policy,
    /// Flows in placement order with their current link.
    placed: Vec<(String, Option<String>)>,
    pending: BTreeSet<String>,
    hot: bool,
}

impl Balancer {
    fn link_of(&self, flow: &str) -> Option<&str> {
        self.placed.iter().find(|(f, _)| f == flow).and_then(|(_, l)| l.as_deref())
    }

    fn request(&mut self, flow: &str, to: &str, out: &mut Out) {
        self.pending.insert(flow.to_owned());
        out.send(GUARD, Body::Request { flow: flow.to_owned(), to: to.to_owned() });
    }
}

impl Component for Balancer {
    fn handle(&mut self, env: &Envelope, out: &mut Out) {
        match &env.body {
            Body::Arrive { flow, demand } => {
                out.traces.push(TraceEvent::FlowArrival { flow: flow.clone(), demand: *demand });
                self.placed.push((flow.clone(), None));
                let to = if self.hot { self.secondary.clone() } else { self.primary.clone() };
                self.request(flow, &to, out);
            }
            Body::Notify { link, payload } if *link == self.primary => match payload.first().and_then(Value::as_str) {
                Some("Alert") => {
                    self.hot = true;
                    // Newest flow on the primary first. The careful balancer
                    // skips flows the policy would refuse.
                    let candidate = self
                        .placed
                        .iter()
                        .rev()
                        .filter(|(f, l)| l.as_deref() == Some(&self.primary) && !self.pending.contains(f))
                        .map(|(f, _)| f.clone())
                        .find(|f| {
                            self.buggy
                                || policy_guard(&Reroute { flow: f.clone(), to: self.secondary.clone() }, &self.policy)
                                    == Verdict::Allow
                        });
                    if let Some(flow) = candidate {
                        let (from, to) = (self.primary.clone(), self.secondary.clone());
                        out.traces.push(TraceEvent::RerouteRequest { flow: flow.clone(), from, to: to.clone() });
                        self.request(&flow, &to, out);
                    }
                }
                Some("OK") => self.hot = false,
                _ => {}
            },
            Body::Verdict { flow, to, allowed } => {
                self.pending.remove(flow);
                if *allowed {
                    if let Some(slot) = self.placed.iter_mut().find(|(f, _)| f == flow) {
                        slot.1 = Some(to.clone());
                    }
                } else if self.link_of(flow).is_none() {
                    // A refused first placement falls back to the other link.
                    let other = if *to == self.primary { self.secondary.clone() } else { self.primary.clone() };
                    self.request(flow, &other, out);
                }
            }
            _ => {}
        }
    }
}

struct Guard {
    policy: Policy,
}

impl Component for Guard {
    fn handle(&mut self, env: &Envelope, out: &mut Out) {
        let Body::Request { flow, to } = &env.body else { return };
        let verdict = policy_guard(&Reroute { flow: flow.clone(), to: to.clone() }, &self.policy);
        let allowed = verdict == Verdict::Allow;
        if let Verdict::Block { rule, .. } = verdict {
            let alarm = Alarm { flow: flow.clone(), rule: rule.clone(), link: to.clone(), ts: env.ts };
            out.publishes.push((ALARM_TOPIC.to_owned(), serde_json::to_vec(&alarm).expect("alarms serialize")));
            out.traces.push(TraceEvent::PolicyBlock { flow: flow.clone(), to: to.clone(), rule });
        } else {
            out.send(LINKS, Body::Assign { flow: flow.clone(), link: to.clone() });
        }
        out.send(BALANCER, Body::Verdict { flow: flow.clone(), to: to.clone(), allowed });
    }
}

type SortKey = (u64, u32, String, String, u32);

/// Collects trace records and alarms and returns the weight it received.
async fn run_tracer(client: Client, mut inbox: Inbox) -> Result<EventTrace, DemoError> {
    let mut records: Vec<(SortKey, TraceRecord)> = Vec::new();
    let mut pending_alarms: HashMap<String, Vec<Alarm>> = HashMap::new();
    loop {
        match inbox.recv().await? {
            Event::Publication { topic, src, data } if topic == ALARM_TOPIC => {
                pending_alarms.entry(src).or_default().push(serde_json::from_slice(&data)?);
            }
            Event::Publication { data, .. } => {
                let env: Envelope = serde_json::from_slice(&data)?;
                let Body::Trace { record, index } = env.body else { continue };
                let key = |r: &TraceRecord, i: u32| (r.round, r.step, r.source.clone(), r.event.link().to_owned(), i);
                records.push((key(&record, 2 * index), record.clone()));
                for a in pending_alarms.remove(&record.source).unwrap_or_default() {
                    let alarm = TraceRecord {
                        event: TraceEvent::Alarm { flow: a.flow, rule: a.rule, link: a.link },
                        ..record.clone()
                    };
                    records.push((key(&alarm, 2 * index + 1), alarm));
                }
                let done = Envelope { weight: env.weight, body: Body::Done, ..env };
                client.send(DRIVER, serde_json::to_vec(&done)?).await?;
            }
            Event::Direct { data, .. } => {
                let env: Envelope = serde_json::from_slice(&data)?;
                if matches!(env.body, Body::Stop) {
                    break;
                }
            }
            Event::NoRoute { .. } => {}
        }
    }
    records.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(EventTrace { records: records.into_iter().map(|(_, r)| r).collect() })
}

struct Driver {
    client: Client,
    inbox: Inbox,
    round: u64,
}

impl Driver {
    async fn round(&mut self, ts: f64, msgs: Vec<(&str, Body)>) -> Result<(), DemoError> {
        let mut w = TOTAL_WEIGHT;
        for (dest, body) in msgs {
            let e = Envelope { round: self.round, step: 0, ts, weight: split(&mut w), body };
            self.client.send(dest, serde_json::to_vec(&e)?).await?;
        }
        let mut held = w;
        while held < TOTAL_WEIGHT {
            let ev = tokio::time::timeout(ROUND_TIMEOUT, self.inbox.recv()).await.map_err(|_| DemoError::Stalled(self.round))??;
            let Event::Direct { data, .. } = ev else { continue };
            let env: Envelope = serde_json::from_slice(&data)?;
            if matches!(env.body, Body::Done) && env.round == self.round {
                held += env.weight;
            }
        }
        self.round += 1;
        Ok(())
    }
}

async fn join_client(ep: &Endpoint, name: &str) -> Result<(Client, Inbox), DemoError> {
    connect(ClientOptions::new(ep.clone(), name)).await.map_err(|e| match e {
        ClientError::ConnectFailed(_) | ClientError::Timeout(_) => DemoError::BrokerUnavailable(format!("{ep}: {e}")),
        other => DemoError::Client(other),
    })
}

/// Runs the scenario against the broker at `broker`, or against a private
/// in-process broker when `None`.
pub async fn run_demo(s: &DemoScenario, broker: Option<Endpoint>) -> Result<EventTrace, DemoError> {
    if s.links.len() != 2 {
        return Err(DemoError::Scenario("the scenario needs exactly two links".into()));
    }
    let mut own: Option<BrokerHandle> = None;
    let ep = match broker {
        Some(ep) => ep,
        None => {
            let mut opts = BrokerOptions::new("demo");
            opts.listen.push("tcp://127.0.0.1:0".parse().expect("valid endpoint"));
            let h = spawn_broker(opts).await.map_err(|e| DemoError::BrokerUnavailable(e.to_string()))?;
            let ep = h.endpoints()[0].clone();
            own = Some(h);
            ep
        }
    };
    let result = run_on(s, &ep).await;
    if let Some(h) = own {
        h.shutdown();
    }
    result
}

async fn run_on(s: &DemoScenario, ep: &Endpoint) -> Result<EventTrace, DemoError> {
    let (tracer_client, mut tracer_inbox) = join_client(ep, TRACER).await?;
    tracer_client.subscribe("trace.").await?;
    tracer_client.subscribe(ALARM_TOPIC).await?;
    // A publication to ourselves confirms both subscriptions are installed.
    tracer_client.publish("trace.ready", Bytes::new()).await?;
    while !matches!(tracer_inbox.recv().await?, Event::Publication { topic, .. } if topic == "trace.ready") {}
    let tracer = tokio::spawn(run_tracer(tracer_client.clone(), tracer_inbox));

    let (driver_client, driver_inbox) = join_client(ep, DRIVER).await?;
    let mut names = Vec::new();
    let mut tasks = Vec::new();
    macro_rules! start {
        ($name:expr, $comp:expr) => {{
            let name: String = $name;
            let (c, i) = join_client(ep, &name).await?;
            names.push(name.clone());
            tasks.push((name.clone(), tokio::spawn(run_component(name, c, i, $comp))));
        }};
    }

    start!(LINKS.to_owned(), Links::new(s)?);
    let dt = s.dt_ms as f64 / 1000.0;
    for l in &s.links {
        let mon = RateMon {
            window: MomentWindow::new(dt),
            detector: RiskDetector::new(l.capacity, s.threshold, s.k),
            report_every: s.report_every,
        };
        start!(ratemon_name(&l.name), mon);
    }
    let mut plans = BTreeMap::new();
    for l in &s.links {
        let program = measure::parse(&s.program(&l.name)).map_err(|e| DemoError::Scenario(e.to_string()))?;
        let bindings: MfBinding = [("r".to_owned(), ratemon_name(&l.name))].into();
        let plan = measure::compile(&program, &bindings).map_err(|e| DemoError::Scenario(e.to_string()))?;
        plans.insert(l.name.clone(), plan);
    }
    start!(AGG.to_owned(), Aggregator { plans });
    start!(
        BALANCER.to_owned(),
        Balancer {
            primary: s.primary().to_owned(),
            secondary: s.secondary().to_owned(),
            buggy: s.buggy,
            policy: s.policy.clone(),
            placed: Vec::new(),
            pending: BTreeSet::new(),
            hot: false,
        }
    );
    start!(GUARD.to_owned(), Guard { policy: s.policy.clone() });

    let mut driver = Driver { client: driver_client.clone(), inbox: driver_inbox, round: 0 };
    let run = async {
        for tick in 0..s.ticks {
            let ts = s.ts(tick);
            let arrivals: Vec<(&str, Body)> = s
                .flows
                .iter()
                .filter(|f| f.arrival_tick == tick)
                .map(|f| (BALANCER, Body::Arrive { flow: f.name.clone(), demand: f.demand * s.intensity }))
                .collect();
            if !arrivals.is_empty() {
                driver.round(ts, arrivals).await?;
            }
            driver.round(ts, vec![(LINKS, Body::Tick { tick })]).await?;
        }
        Ok::<(), DemoError>(())
    };
    let outcome = run.await;

    let stop = serde_json::to_vec(&Envelope { round: driver.round, step: 0, ts: 0.0, weight: 0, body: Body::Stop })?;
    for n in names.iter().map(String::as_str).chain([TRACER]) {
        driver_client.send(n, stop.clone()).await?;
    }
    for (name, t) in tasks {
        match t.await {
            Ok(r) => r?,
            Err(_) => return Err(DemoError::Component(name)),
        }
    }
    let trace = tracer.await.map_err(|_| DemoError::Component(TRACER.into()))??;
    outcome?;
    driver_client.close().await;
    tracer_client.close().await;
    Ok(trace)
}
