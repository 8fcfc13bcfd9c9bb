//! Tokio transport for the broker: TCP and unix-socket listeners, an optional
//! parent connection with reconnect, heartbeat ticking and stats publishing.
//!
//! The routing core sits behind a plain mutex. Each inbound frame is handled
//! under the lock, the resulting frames are collected, and the lock is
//! released before anything is written. Every session owns a bounded outbound
//! queue drained by a writer task that batches whatever is ready into one
//! socket write.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::{Bytes, BytesMut};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream, UnixListener, UnixStream};
use tokio::sync::mpsc;
use tokio::task::{AbortHandle, JoinHandle};

use crate::broker::{Broker, BrokerConfig, Output, SessionId, SessionReport};
use crate::wire::{self, Frame, FrameBuffer};

/// Frames queued per session before the producing reader waits.
pub const SESSION_QUEUE: usize = 4096;
const WRITE_BATCH: usize = 256 * 1024;
const READ_CHUNK: usize = 64 * 1024;

pub const BACKOFF_START: Duration = Duration::from_millis(500);
pub const BACKOFF_MAX: Duration = Duration::from_secs(8);

/// A transport address: `tcp://host:port` or `local:///path/to/socket`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Local(PathBuf),
}

#[derive(Debug, thiserror::Error)]
#[error("bad endpoint {0:?}: expected tcp://host:port or local:///path")]
pub struct BadEndpoint(pub String);

impl FromStr for Endpoint {
    type Err = BadEndpoint;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) {
                return Ok(Endpoint::Tcp(addr.to_owned()));
            }
        } else if let Some(path) = s.strip_prefix("local://") {
            if path.starts_with('/') {
                return Ok(Endpoint::Local(PathBuf::from(path)));
            }
        }
        Err(BadEndpoint(s.to_owned()))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Local(p) => write!(f, "local://{}", p.display()),
        }
    }
}

pub(crate) type BoxRead = Box<dyn AsyncRead + Send + Unpin>;
pub(crate) type BoxWrite = Box<dyn AsyncWrite + Send + Unpin>;

pub(crate) async fn dial(ep: &Endpoint) -> io::Result<(BoxRead, BoxWrite)> {
    match ep {
        Endpoint::Tcp(addr) => {
            let s = TcpStream::connect(addr).await?;
            s.set_nodelay(true)?;
            let (r, w) = s.into_split();
            Ok((Box::new(r), Box::new(w)))
        }
        Endpoint::Local(path) => {
            let (r, w) = UnixStream::connect(path).await?.into_split();
            Ok((Box::new(r), Box::new(w)))
        }
    }
}

/// Drains `rx` onto `w`, coalescing queued frames into one write.
pub(crate) async fn write_loop(mut w: BoxWrite, mut rx: mpsc::Receiver<Frame>) -> io::Result<()> {
    let mut buf = BytesMut::with_capacity(READ_CHUNK);
    while let Some(frame) = rx.recv().await {
        push_frame(&frame, &mut buf);
        while buf.len() < WRITE_BATCH {
            match rx.try_recv() {
                Ok(f) => push_frame(&f, &mut buf),
                Err(_) => break,
            }
        }
        w.write_all(&buf).await?;
        buf.clear();
    }
    w.shutdown().await
}

fn push_frame(frame: &Frame, buf: &mut BytesMut) {
    if let Err(e) = wire::encode_into(frame, buf) {
        tracing::warn!(kind = frame.kind_name(), error = %e, "dropping unencodable frame");
    }
}

/// Pulls whole frames off a byte stream.
pub(crate) struct FrameReader {
    r: BoxRead,
    fb: FrameBuffer,
}

impl FrameReader {
    pub(crate) fn new(r: BoxRead) -> Self {
        Self { r, fb: FrameBuffer::new() }
    }

    /// The next frame, `None` at EOF. A codec error ends the stream.
    pub(crate) async fn next(&mut self) -> io::Result<Option<Frame>> {
        loop {
            match self.fb.next_frame() {
                Ok(Some(frame)) => return Ok(Some(frame)),
                Ok(None) => {}
                Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
            }
            self.fb.inner_mut().reserve(READ_CHUNK);
            if self.r.read_buf(self.fb.inner_mut()).await? == 0 {
                return Ok(None);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BrokerOptions {
    pub config: BrokerConfig,
    pub listen: Vec<Endpoint>,
    pub parent: Option<Endpoint>,
    /// Publish per-link counters on this topic once per second.
    pub stats_topic: Option<String>,
}

impl BrokerOptions {
    pub fn new(name: impl Into<String>) -> Self {
        Self { config: BrokerConfig::new(name), listen: Vec::new(), parent: None, stats_topic: None }
    }
}

struct SessionIo {
    tx: mpsc::Sender<Frame>,
    reader: Option<AbortHandle>,
}

struct Core {
    broker: Broker,
    io: HashMap<SessionId, SessionIo>,
}

struct Shared {
    core: Mutex<Core>,
    next_id: AtomicU64,
}

impl Shared {
    fn id(&self) -> SessionId {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Runs `f` on the broker under the lock and returns where each frame goes.
    fn with_broker<F>(&self, f: F) -> Vec<(mpsc::Sender<Frame>, Frame)>
    where
        F: FnOnce(&mut Broker) -> Vec<Output>,
    {
        let mut core = self.core.lock().unwrap();
        let out = f(&mut core.broker);
        let mut sends = Vec::with_capacity(out.len());
        for o in out {
            match o {
                Output::Frame(id, frame) => {
                    if let Some(s) = core.io.get(&id) {
                        sends.push((s.tx.clone(), frame));
                    }
                }
                Output::Close(id) => {
                    if let Some(s) = core.io.remove(&id) {
                        if let Some(r) = s.reader {
                            r.abort();
                        }
                    }
                }
            }
        }
        sends
    }

    async fn run<F>(&self, f: F)
    where
        F: FnOnce(&mut Broker) -> Vec<Output>,
    {
        for (tx, frame) in self.with_broker(f) {
            // A closed queue means the session is going away; its close
            // reaches the broker through the reader.
            let _ = tx.send(frame).await;
        }
    }
}

/// A running broker. Dropping the handle leaves it running; call
/// [`BrokerHandle::shutdown`] to stop every task.
pub struct BrokerHandle {
    shared: Arc<Shared>,
    bound: Vec<Endpoint>,
    tasks: Vec<JoinHandle<()>>,
}

impl BrokerHandle {
    /// Listening endpoints with any port 0 resolved.
    pub fn endpoints(&self) -> &[Endpoint] {
        &self.bound
    }

    pub fn stats(&self) -> Vec<SessionReport> {
        self.shared.core.lock().unwrap().broker.stats_report()
    }

    pub fn routes(&self) -> Vec<String> {
        self.shared.core.lock().unwrap().broker.routes().into_keys().collect()
    }

    pub fn has_parent(&self) -> bool {
        self.shared.core.lock().unwrap().broker.parent().is_some()
    }

    pub fn shutdown(self) {
        for t in &self.tasks {
            t.abort();
        }
        let mut core = self.shared.core.lock().unwrap();
        for (_, s) in core.io.drain() {
            if let Some(r) = s.reader {
                r.abort();
            }
        }
    }

    /// Waits until the task set ends (in practice: forever, or until shutdown).
    pub async fn join(self) {
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

pub async fn spawn_broker(opts: BrokerOptions) -> io::Result<BrokerHandle> {
    let shared = Arc::new(Shared {
        core: Mutex::new(Core { broker: Broker::new(opts.config.clone()), io: HashMap::new() }),
        next_id: AtomicU64::new(1),
    });
    let mut tasks = Vec::new();
    let mut bound = Vec::new();
    for ep in &opts.listen {
        match ep {
            Endpoint::Tcp(addr) => {
                let l = TcpListener::bind(addr).await?;
                bound.push(Endpoint::Tcp(l.local_addr()?.to_string()));
                tasks.push(tokio::spawn(accept_tcp(l, shared.clone())));
            }
            Endpoint::Local(path) => {
                if path.exists() {
                    std::fs::remove_file(path)?;
                }
                let l = UnixListener::bind(path)?;
                bound.push(ep.clone());
                tasks.push(tokio::spawn(accept_local(l, shared.clone())));
            }
        }
    }
    if let Some(parent) = opts.parent.clone() {
        tasks.push(tokio::spawn(parent_loop(parent, shared.clone())));
    }
    tasks.push(tokio::spawn(heartbeat_loop(shared.clone(), opts.config.heartbeat)));
    if let Some(topic) = opts.stats_topic.clone() {
        tasks.push(tokio::spawn(stats_loop(shared.clone(), topic)));
    }
    tracing::info!(broker = %opts.config.name, endpoints = ?bound, "broker up");
    Ok(BrokerHandle { shared, bound, tasks })
}

async fn accept_tcp(l: TcpListener, shared: Arc<Shared>) {
    loop {
        match l.accept().await {
            Ok((s, peer)) => {
                let _ = s.set_nodelay(true);
                tracing::debug!(%peer, "accepted tcp session");
                let (r, w) = s.into_split();
                start_session(&shared, Box::new(r), Box::new(w), false).await;
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

async fn accept_local(l: UnixListener, shared: Arc<Shared>) {
    loop {
        match l.accept().await {
            Ok((s, _)) => {
                let (r, w) = s.into_split();
                start_session(&shared, Box::new(r), Box::new(w), false).await;
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

/// Registers a session with the core and spawns its reader and writer.
/// Returns the reader task, which ends when the session does.
async fn start_session(shared: &Arc<Shared>, r: BoxRead, w: BoxWrite, parent: bool) -> JoinHandle<()> {
    let id = shared.id();
    let (tx, rx) = mpsc::channel(SESSION_QUEUE);
    tokio::spawn(async move {
        if let Err(e) = write_loop(w, rx).await {
            tracing::debug!(session = id, error = %e, "writer ended");
        }
    });
    // The session must exist in the core before its first frame is read.
    let sends = {
        let mut core = shared.core.lock().unwrap();
        core.io.insert(id, SessionIo { tx: tx.clone(), reader: None });
        let now = Instant::now();
        if parent {
            core.broker.attach_parent(id, now)
        } else {
            core.broker.open_session(id, now);
            Vec::new()
        }
    };
    for o in sends {
        if let Output::Frame(_, frame) = o {
            let _ = tx.send(frame).await;
        }
    }
    let reader_shared = shared.clone();
    let reader = tokio::spawn(async move {
        let mut frames = FrameReader::new(r);
        let res = loop {
            match frames.next().await {
                Ok(Some(frame)) => reader_shared.run(|b| b.handle(id, frame, Instant::now())).await,
                Ok(None) => break Ok(()),
                Err(e) => break Err(e),
            }
        };
        if let Err(e) = res {
            tracing::debug!(session = id, error = %e, "session read ended");
        }
        reader_shared.run(|b| b.close_session(id)).await;
        reader_shared.core.lock().unwrap().io.remove(&id);
    });
    if let Some(s) = shared.core.lock().unwrap().io.get_mut(&id) {
        s.reader = Some(reader.abort_handle());
    }
    reader
}

async fn parent_loop(ep: Endpoint, shared: Arc<Shared>) {
    let mut backoff = BACKOFF_START;
    loop {
        match dial(&ep).await {
            Ok((r, w)) => {
                tracing::info!(parent = %ep, "connected to parent");
                backoff = BACKOFF_START;
                let reader = start_session(&shared, r, w, true).await;
                let _ = reader.await;
                tracing::warn!(parent = %ep, "lost parent");
            }
            Err(e) => tracing::debug!(parent = %ep, error = %e, "parent connect failed"),
        }
        tokio::time::sleep(backoff).await;
        backoff = (backoff * 2).min(BACKOFF_MAX);
    }
}

async fn heartbeat_loop(shared: Arc<Shared>, interval: Duration) {
    let mut tick = tokio::time::interval((interval / 4).max(Duration::from_millis(10)));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        let mut expired = Vec::new();
        shared
            .run(|b| {
                let (out, dead) = b.heartbeat_tick(Instant::now());
                expired = dead;
                out
            })
            .await;
        for id in expired {
            tracing::info!(session = id, "session expired");
        }
    }
}

async fn stats_loop(shared: Arc<Shared>, topic: String) {
    let mut tick = tokio::time::interval(Duration::from_secs(1));
    loop {
        tick.tick().await;
        shared
            .run(|b| {
                let body = serde_json::to_vec(&b.stats_report()).unwrap_or_default();
                b.publish_local(&topic, Bytes::from(body))
            })
            .await;
    }
}
