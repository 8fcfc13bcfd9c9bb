use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde_json::json;
use spmon::bench::{bench_broker, BenchConfig};
use spmon::collect::run_collector;
use spmon::demo::{run_demo, DemoScenario};
use spmon_bus::{connect, spawn_broker, BrokerOptions, Client, ClientOptions, Endpoint, Event, Inbox};
use spmon_core::measure::{self, MfBinding, MonitorResult};
use spmon_core::pathmon::{self, LinkParams, LossMethod, SimConfig};
use spmon_core::query::{self, Agg, Engine, GraphStore, MetricsStore, QueryOptions, Rule};
use spmon_core::ratemon::{fit, MomentWindow, RateReport, RiskDetector};

#[derive(Parser)]
#[command(name = "spmon", version, about = "Service-provider monitoring toolkit")]
struct Cli {
    /// Log filter, e.g. `info` or `spmon_bus=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a broker.
    Broker(BrokerArgs),
    /// Run a MEASURE aggregation point.
    Aggpoint(AggArgs),
    /// Run a lognormal rate monitor for one entity.
    Ratemon(RateArgs),
    /// Simulate a monitored path and estimate per-link delay and loss.
    Pathsim(PathArgs),
    /// Evaluate a query over a service graph.
    Query(QueryArgs),
    /// Measure broker throughput and latency.
    Bench(BenchArgs),
    /// Store `rate.*` and `path.*` reports in a metrics log.
    Collect(CollectArgs),
    /// Run the integrated demo scenario.
    Demo(DemoArgs),
}

#[derive(Args)]
struct BrokerArgs {
    #[arg(long, default_value = "broker")]
    name: String,
    /// `tcp://host:port` or `local:///path`; repeatable.
    #[arg(long, default_value = "tcp://0.0.0.0:5555")]
    listen: Vec<Endpoint>,
    #[arg(long)]
    parent: Option<Endpoint>,
    #[arg(long, default_value_t = 2000)]
    heartbeat_ms: u64,
    #[arg(long, default_value_t = 3)]
    miss_limit: u32,
    /// Publish per-link frame counters on this topic once per second.
    #[arg(long)]
    stats_topic: Option<String>,
}

#[derive(Args)]
struct Bus {
    #[arg(long, env = "DD_BROKER")]
    broker: Option<Endpoint>,
}

#[derive(Args)]
struct AggArgs {
    #[arg(long)]
    program: PathBuf,
    /// JSON object mapping measurement ids to MF-IDs.
    #[arg(long)]
    bindings: PathBuf,
    #[arg(long, env = "DD_BROKER")]
    broker: Endpoint,
    #[arg(long, env = "DD_NAME", default_value = "agg1")]
    name: String,
}

#[derive(Args)]
struct RateArgs {
    #[arg(long)]
    entity: String,
    /// Link capacity in bit/s.
    #[arg(long)]
    capacity: f64,
    #[arg(long, default_value_t = 300)]
    dt_ms: u64,
    /// Intervals per estimate.
    #[arg(long, default_value_t = 10)]
    report_every: u64,
    #[arg(long, default_value_t = RiskDetector::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = RiskDetector::DEFAULT_K)]
    k: u32,
    #[command(flatten)]
    bus: Bus,
    #[arg(long, env = "DD_NAME")]
    name: Option<String>,
    /// Identity that receives every report.
    #[arg(long)]
    aggregator: Option<String>,
    /// Byte counts, one per interval; `-` reads standard input.
    #[arg(long, default_value = "-", conflicts_with = "synthetic")]
    input: String,
    /// Generate lognormal traffic with this mean utilization instead.
    #[arg(long)]
    synthetic: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    cv: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of synthetic intervals.
    #[arg(long, default_value_t = 1000)]
    intervals: u64,
    /// Pace synthetic intervals in real time.
    #[arg(long)]
    realtime: bool,
}

#[derive(Args)]
struct PathArgs {
    #[arg(long, default_value_t = 6)]
    hops: usize,
    #[arg(long, default_value_t = 100_000)]
    packets: u64,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.04)]
    loss: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    gamma_shape: f64,
    /// Seconds.
    #[arg(long, default_value_t = 0.001)]
    gamma_scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Publish per-link estimates on `path.<id>.<link>`.
    #[arg(long)]
    publish: Option<String>,
    #[command(flatten)]
    bus: Bus,
    #[command(subcommand)]
    sweep: Option<PathCmd>,
}

#[derive(Subcommand)]
enum PathCmd {
    /// RMSE against ground truth over a grid of α and seeds.
    Sweep {
        /// `start:end:step`.
        #[arg(long, default_value = "0.05:0.5:0.05")]
        alphas: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct QueryArgs {
    /// Fact file; the bundled example graph when absent.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Rule file or directory of `.dl` files, repeatable; the bundled library
    /// when absent.
    #[arg(long)]
    rules: Vec<PathBuf>,
    /// Metrics log (newline-delimited JSON points).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Query window in seconds ending at the newest point; 0 keeps everything.
    #[arg(long, default_value_t = 60.0)]
    span: f64,
    #[arg(long, default_value = "mean")]
    agg: Agg,
    /// `name arg ...`, e.g. `e2e_delay nf1 nf2`, or an atom such as
    /// `child(nf1, Y)`.
    query: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// A private in-process broker is started when absent.
    #[command(flatten)]
    bus: Bus,
    /// Payload size in bytes; repeatable.
    #[arg(long, default_value = "100")]
    size: Vec<usize>,
    /// Seconds per size.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long, env = "DD_BROKER")]
    broker: Endpoint,
    #[arg(long, env = "DD_NAME", default_value = "collector")]
    name: String,
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Scale traffic to a tenth.
    #[arg(long)]
    calm: bool,
    /// Let the balancer ignore the pin policy.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    buggy: bool,
    /// A private in-process broker is started when absent.
    #[command(flatten)]
    bus: Bus,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log_level))
        .with_writer(io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(dispatch(cli.cmd)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

async fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Broker(a) => broker(a).await?,
        Cmd::Aggpoint(a) => aggpoint(a).await?,
        Cmd::Ratemon(a) => ratemon(a).await?,
        Cmd::Pathsim(a) => pathsim(a).await?,
        Cmd::Query(a) => return query(a),
        Cmd::Bench(a) => bench(a).await?,
        Cmd::Collect(a) => collect(a).await?,
        Cmd::Demo(a) => return demo(a).await,
    }
    Ok(ExitCode::SUCCESS)
}

async fn broker(a: BrokerArgs) -> Result<()> {
    let mut opts = BrokerOptions::new(a.name);
    opts.config.heartbeat = Duration::from_millis(a.heartbeat_ms);
    opts.config.miss_limit = a.miss_limit;
    opts.listen = a.listen;
    opts.parent = a.parent;
    opts.stats_topic = a.stats_topic;
    let h = spawn_broker(opts).await.context("starting broker")?;
    for ep in h.endpoints() {
        eprintln!("listening on {ep}");
    }
    h.join().await;
    Ok(())
}

async fn join(ep: &Endpoint, name: &str) -> Result<(Client, Inbox)> {
    connect(ClientOptions::new(ep.clone(), name)).await.with_context(|| format!("connecting to {ep} as {name}"))
}

async fn aggpoint(a: AggArgs) -> Result<()> {
    let src = fs::read_to_string(&a.program).with_context(|| a.program.display().to_string())?;
    let program = measure::parse(&src).map_err(|e| anyhow::anyhow!("{}: {e}", a.program.display()))?;
    let bindings: MfBinding = serde_json::from_str(&fs::read_to_string(&a.bindings)?).context("bindings")?;
    let mut plan = measure::compile(&program, &bindings)?;
    let (client, mut inbox) = join(&a.broker, &a.name).await?;
    // MF-IDs that look like topics are subscribed to; the rest are monitor
    // identities that send here directly.
    let topics: Vec<&String> = bindings.values().filter(|v| v.contains('.')).collect();
    for t in &topics {
        client.subscribe(t).await?;
    }
    let mut out = io::stdout().lock();
    loop {
        let (mf_id, data) = match inbox.recv().await? {
            Event::Direct { src, data } => (src, data),
            Event::Publication { topic, data, .. } if topics.contains(&&topic) => (topic, data),
            _ => continue,
        };
        // A bare RateReport is read as a risk sample from its sender.
        let r = match serde_json::from_slice::<MonitorResult>(&data) {
            Ok(r) => r,
            Err(_) => match serde_json::from_slice::<RateReport>(&data) {
                Ok(rep) => MonitorResult { mf_id, value: rep.risk, unit: String::new(), ts: rep.ts },
                Err(e) => {
                    tracing::warn!(error = %e, "ignoring undecodable result");
                    continue;
                }
            },
        };
        let o = match plan.ingest_result(&r) {
            Ok(o) => o,
            Err(e) => {
                tracing::warn!(error = %e, "sample dropped");
                continue;
            }
        };
        if let Some((from, to)) = &o.changed {
            writeln!(out, "{}", json!({"ts": r.ts, "from": from.to_string(), "to": to.to_string()}))?;
        }
        for n in o.notifications {
            let payload = n.payload_json();
            client.send(&n.dest, payload.clone()).await?;
            client.publish(&n.topic(), payload.clone()).await?;
            writeln!(out, "{}", json!({"ts": n.ts, "notify": n.dest, "payload": n.payload}))?;
        }
    }
}

async fn ratemon(a: RateArgs) -> Result<()> {
    if a.report_every < 2 {
        bail!("--report-every must be at least 2");
    }
    let capacity = a.capacity / 8.0;
    let dt = a.dt_ms as f64 / 1000.0;
    let client = match &a.bus.broker {
        Some(ep) => Some(join(ep, a.name.as_deref().unwrap_or(&format!("ratemon-{}", a.entity))).await?.0),
        None => None,
    };
    let samples: Box<dyn Iterator<Item = Result<f64>>> = match a.synthetic {
        Some(u) => {
            let d = LogNormal::from_mean_cv(u * capacity, a.cv).context("synthetic traffic")?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            Box::new((0..a.intervals).map(move |_| Ok(d.sample(&mut rng) * dt)))
        }
        None => {
            let reader: Box<dyn BufRead> = if a.input == "-" {
                Box::new(io::stdin().lock())
            } else {
                Box::new(io::BufReader::new(fs::File::open(&a.input).with_context(|| a.input.clone())?))
            };
            Box::new(reader.lines().filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty())).map(|l| {
                let l = l?;
                l.trim().parse::<f64>().with_context(|| format!("bad byte count {l:?}"))
            }))
        }
    };
    let mut window = MomentWindow::new(dt);
    let mut detector = RiskDetector::new(capacity, a.threshold, a.k);
    let mut out = io::stdout().lock();
    for (i, bytes) in samples.enumerate() {
        if a.realtime && a.synthetic.is_some() {
            tokio::time::sleep(Duration::from_millis(a.dt_ms)).await;
        }
        window.observe(bytes?);
        if window.n() < a.report_every {
            continue;
        }
        let fitted = fit(&window);
        window.reset();
        let p = match fitted {
            Ok(p) => p,
            Err(e) => {
                tracing::warn!(error = %e, "window skipped");
                continue;
            }
        };
        let (risk, event) = detector.tick_params(&p);
        let report = RateReport::new(a.entity.clone(), &p, risk, (i as u64 + 1) as f64 * dt);
        let data = serde_json::to_vec(&report)?;
        writeln!(out, "{}", String::from_utf8_lossy(&data))?;
        if let Some(e) = event {
            tracing::info!(entity = %a.entity, event = ?e, risk, "zone change");
        }
        if let Some(c) = &client {
            c.publish(&report.topic(), data.clone()).await?;
            if let Some(agg) = &a.aggregator {
                c.send(agg, data).await?;
            }
        }
    }
    if let Some(c) = client {
        c.close().await;
    }
    Ok(())
}

fn sim_config(a: &PathArgs) -> SimConfig {
    let link = LinkParams { gamma_shape: a.gamma_shape, gamma_scale: a.gamma_scale, loss: a.loss };
    SimConfig { alpha: a.alpha, packets: a.packets, seed: a.seed, ..SimConfig::new(a.hops, link) }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s.split(':').map(str::parse).collect::<Result<_, _>>().context("alpha grid")?;
    let [start, end, step] = parts[..] else { bail!("alpha grid must be start:end:step") };
    if !(step > 0.0 && end >= start) {
        bail!("alpha grid needs step > 0 and end >= start");
    }
    Ok(pathmon::alpha_grid(start, end, step))
}

async fn pathsim(a: PathArgs) -> Result<()> {
    let cfg = sim_config(&a);
    if let Some(PathCmd::Sweep { alphas, seeds, csv }) = &a.sweep {
        let rows = pathmon::sweep(&cfg, &parse_grid(alphas)?, *seeds)?;
        match csv {
            Some(p) => {
                let mut w = ::csv::Writer::from_path(p)?;
                rows.iter().try_for_each(|r| w.serialize(r))?;
                w.flush()?;
            }
            None => {
                let mut w = ::csv::Writer::from_writer(io::stdout());
                rows.iter().try_for_each(|r| w.serialize(r))?;
                w.flush()?;
            }
        }
        return Ok(());
    }
    let run = pathmon::simulate(&cfg)?;
    let delay = pathmon::estimate_link_delay(&run.samples)?;
    let counter = pathmon::estimate_link_loss(&run.samples, LossMethod::Counter)?;
    let consistency = pathmon::estimate_link_loss(&run.samples, LossMethod::Consistency)?;
    let result = json!({
        "config": cfg,
        "records": run.samples.records.len(),
        "truth": run.truth,
        "delay": delay,
        "loss_counter": counter,
        "loss_consistency": consistency,
    });
    let text = serde_json::to_string_pretty(&result)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => writeln!(io::stdout(), "{text}")?,
    }
    if let Some(id) = &a.publish {
        let Some(ep) = &a.bus.broker else { bail!("--publish needs --broker or DD_BROKER") };
        let (c, _) = join(ep, &format!("pathsim-{id}")).await?;
        for r in pathmon::link_reports(id, &delay, &counter, 0.0) {
            c.publish(&r.topic(), serde_json::to_vec(&r)?).await?;
        }
        c.close().await;
    }
    Ok(())
}

fn load_rules(paths: &[PathBuf]) -> Result<Vec<Rule>> {
    if paths.is_empty() {
        return Ok(query::library());
    }
    let mut files: Vec<PathBuf> = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut in_dir: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            in_dir.retain(|f| f.extension().is_some_and(|x| x == "dl"));
            in_dir.sort();
            files.extend(in_dir);
        } else {
            files.push(p.clone());
        }
    }
    let mut rules = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| f.display().to_string())?;
        rules.extend(query::parse_rules(&text).map_err(|e| anyhow::anyhow!("{}: {e}", f.display()))?);
    }
    Ok(rules)
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| p.display().to_string())
}

fn query(a: QueryArgs) -> Result<ExitCode> {
    let graph = match &a.graph {
        Some(p) => GraphStore::load(&read(p)?).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?,
        None => GraphStore::load(query::EXAMPLE_GRAPH)?,
    };
    let rules = load_rules(&a.rules)?;
    let metrics = match &a.metrics {
        Some(p) => MetricsStore::load(p)?,
        None => MetricsStore::new(),
    };
    let options = QueryOptions { span: (a.span > 0.0).then_some(a.span), end: None, agg: a.agg };
    let engine = Engine::new(&graph).with_metrics(&metrics).with_options(options);
    let q = a.query.trim();
    let answers = if q.contains('(') {
        engine.query(&rules, &query::parse_atom(q)?)
    } else {
        engine.command(&rules, q)
    };
    let answers = match answers {
        Ok(ans) => ans,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::FAILURE);
        }
    };
    let mut out = io::stdout().lock();
    for row in &answers.rows {
        if a.json {
            let obj: BTreeMap<&str, &query::Value> = answers.vars.iter().map(String::as_str).zip(row).collect();
            writeln!(out, "{}", serde_json::to_string(&obj)?)?;
        } else {
            let cells: Vec<String> = answers.vars.iter().zip(row).map(|(v, x)| format!("{v} = {x}")).collect();
            writeln!(out, "{}", cells.join(", "))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

async fn bench(a: BenchArgs) -> Result<()> {
    let mut own = None;
    let ep = match a.bus.broker {
        Some(ep) => ep,
        None => {
            let mut opts = BrokerOptions::new("bench");
            opts.listen.push("tcp://127.0.0.1:0".parse()?);
            let h = spawn_broker(opts).await?;
            let ep = h.endpoints()[0].clone();
            own = Some(h);
            ep
        }
    };
    for size in a.size {
        let r = bench_broker(&ep, BenchConfig { size, duration: Duration::from_secs_f64(a.duration) }).await?;
        writeln!(io::stdout(), "{}", serde_json::to_string(&r)?)?;
    }
    if let Some(h) = own {
        h.shutdown();
    }
    Ok(())
}

async fn collect(a: CollectArgs) -> Result<()> {
    let metrics = Arc::new(RwLock::new(MetricsStore::open(&a.metrics)?));
    let (client, mut inbox) = join(&a.broker, &a.name).await?;
    let n = run_collector(&client, &mut inbox, metrics).await?;
    eprintln!("stored {n} points");
    Ok(())
}

async fn demo(a: DemoArgs) -> Result<ExitCode> {
    let mut s = DemoScenario::new(a.seed);
    if a.calm {
        s = s.calm();
    }
    s.buggy = a.buggy;
    let trace = run_demo(&s, a.bus.broker).await?;
    if let Some(p) = &a.trace {
        fs::write(p, trace.to_ndjson()).with_context(|| p.display().to_string())?;
    }
    let summary = json!({
        "records": trace.records.len(),
        "reroute_requests": trace.count("reroute-request"),
        "policy_blocks": trace.count("policy-block"),
        "alarms": trace.count("alarm"),
        "final_assignment": trace.final_assignment(),
    });
    writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&summary)?)?;
    let violations = trace.violations(&s.policy);
    for v in &violations {
        eprintln!("invariant violated: {v}");
    }
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
