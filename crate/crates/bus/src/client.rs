//! Async client: connect and register, then send, publish, subscribe and
//! receive. Payloads are opaque bytes.
//!
//! [`connect`] returns a cloneable [`Client`] for outbound calls and a single
//! [`Inbox`] for inbound events. With reconnect enabled the client redials
//! with exponential backoff, registers the same name again and restores its
//! subscriptions.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use tokio::sync::{mpsc, oneshot, watch};

use crate::broker::{DEFAULT_HEARTBEAT, DEFAULT_MISS_LIMIT, REASON_NAME_TAKEN};
use crate::net::{dial, write_loop, FrameReader, BadEndpoint, Endpoint, BACKOFF_MAX, BACKOFF_START, SESSION_QUEUE};
use crate::wire::Frame;

pub const ENV_BROKER: &str = "DD_BROKER";
pub const ENV_NAME: &str = "DD_NAME";
pub const REGISTER_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connect failed: {0}")]
    ConnectFailed(#[source] std::io::Error),
    #[error("name {0:?} is taken")]
    NameTaken(String),
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error("no registration answer within {0:?}")]
    Timeout(Duration),
    #[error("not connected")]
    NotConnected,
    #[error("publish needs a non-empty topic")]
    EmptyTopic,
    #[error("disconnected from broker")]
    Disconnected,
    #[error("empty client name")]
    EmptyName,
    #[error(transparent)]
    Endpoint(#[from] BadEndpoint),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Disconnected,
    Registering,
    Ready,
}

/// Something the broker delivered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Direct { src: String, data: Bytes },
    Publication { topic: String, src: String, data: Bytes },
    /// An earlier send to `dest` could not be routed.
    NoRoute { dest: String },
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub endpoint: Endpoint,
    pub name: String,
    pub reconnect: bool,
    pub register_timeout: Duration,
    /// Broker silence after which the connection is considered dead.
    pub dead_after: Duration,
}

impl ClientOptions {
    pub fn new(endpoint: Endpoint, name: impl Into<String>) -> Self {
        Self {
            endpoint,
            name: name.into(),
            reconnect: false,
            register_timeout: REGISTER_TIMEOUT,
            dead_after: DEFAULT_HEARTBEAT * DEFAULT_MISS_LIMIT,
        }
    }

    /// Reads `DD_BROKER` and `DD_NAME`.
    pub fn from_env() -> Result<Self, ClientError> {
        let ep = std::env::var(ENV_BROKER).map_err(|_| ClientError::MissingEnv(ENV_BROKER))?;
        let name = std::env::var(ENV_NAME).map_err(|_| ClientError::MissingEnv(ENV_NAME))?;
        Ok(Self::new(ep.parse()?, name))
    }

    pub fn reconnect(mut self, on: bool) -> Self {
        self.reconnect = on;
        self
    }
}

struct State {
    conn: ConnState,
    tx: Option<mpsc::Sender<Frame>>,
    prefixes: BTreeSet<String>,
    reader: Option<tokio::task::AbortHandle>,
    closed: bool,
}

struct Shared {
    name: String,
    state: Mutex<State>,
    conn_watch: watch::Sender<ConnState>,
}

/// Outbound half. Cheap to clone and usable from any task.
#[derive(Clone)]
pub struct Client {
    shared: Arc<Shared>,
}

/// Inbound half, read by one consumer.
pub struct Inbox {
    rx: mpsc::UnboundedReceiver<Event>,
}

impl Inbox {
    /// Waits for the next event. Fails once the client is permanently gone.
    pub async fn recv(&mut self) -> Result<Event, ClientError> {
        self.rx.recv().await.ok_or(ClientError::Disconnected)
    }

    /// Returns an already-delivered event without waiting.
    pub fn try_recv(&mut self) -> Option<Event> {
        self.rx.try_recv().ok()
    }

    /// Waits for the next point-to-point message.
    pub async fn receive(&mut self) -> Result<(String, Bytes), ClientError> {
        loop {
            if let Event::Direct { src, data } = self.recv().await? {
                return Ok((src, data));
            }
        }
    }
}

pub async fn connect(opts: ClientOptions) -> Result<(Client, Inbox), ClientError> {
    if opts.name.is_empty() {
        return Err(ClientError::EmptyName);
    }
    let (conn_watch, _) = watch::channel(ConnState::Registering);
    let shared = Arc::new(Shared {
        name: opts.name.clone(),
        state: Mutex::new(State {
            conn: ConnState::Registering,
            tx: None,
            prefixes: BTreeSet::new(),
            reader: None,
            closed: false,
        }),
        conn_watch,
    });
    let (events, rx) = mpsc::unbounded_channel();
    let conn = establish(&opts, &shared, events.clone()).await?;
    tokio::spawn(supervise(opts, shared.clone(), events, conn));
    Ok((Client { shared }, Inbox { rx }))
}

impl Client {
    pub fn name(&self) -> &str {
        &self.shared.name
    }

    pub fn state(&self) -> ConnState {
        self.shared.state.lock().unwrap().conn
    }

    /// Resolves once the connection state equals `want`.
    pub async fn wait_for(&self, want: ConnState) {
        let mut rx = self.shared.conn_watch.subscribe();
        let _ = rx.wait_for(|s| *s == want).await;
    }

    pub async fn send(&self, dest: &str, data: impl Into<Bytes>) -> Result<(), ClientError> {
        self.push(Frame::Send { dest: dest.to_owned(), src: String::new(), data: data.into() }).await
    }

    pub async fn publish(&self, topic: &str, data: impl Into<Bytes>) -> Result<(), ClientError> {
        if topic.is_empty() {
            return Err(ClientError::EmptyTopic);
        }
        self.push(Frame::Pub { topic: topic.to_owned(), data: data.into() }).await
    }

    pub async fn subscribe(&self, prefix: &str) -> Result<(), ClientError> {
        self.push(Frame::Sub { prefix: prefix.to_owned() }).await?;
        self.shared.state.lock().unwrap().prefixes.insert(prefix.to_owned());
        Ok(())
    }

    pub async fn unsubscribe(&self, prefix: &str) -> Result<(), ClientError> {
        self.push(Frame::Unsub { prefix: prefix.to_owned() }).await?;
        self.shared.state.lock().unwrap().prefixes.remove(prefix);
        Ok(())
    }

    /// Unregisters and drops the connection.
    pub async fn close(&self) {
        let _ = self.push(Frame::Unregister).await;
        let mut st = self.shared.state.lock().unwrap();
        st.closed = true;
        st.tx = None;
        st.conn = ConnState::Disconnected;
        if let Some(r) = st.reader.take() {
            r.abort();
        }
        self.shared.conn_watch.send_replace(ConnState::Disconnected);
    }

    async fn push(&self, frame: Frame) -> Result<(), ClientError> {
        let tx = {
            let st = self.shared.state.lock().unwrap();
            match (&st.tx, st.conn) {
                (Some(tx), ConnState::Ready) => tx.clone(),
                _ => return Err(ClientError::NotConnected),
            }
        };
        tx.send(frame).await.map_err(|_| ClientError::NotConnected)
    }
}

/// A registered connection: the reader task ends when the connection does.
struct Connection {
    reader: tokio::task::JoinHandle<()>,
}

fn set_state(shared: &Shared, conn: ConnState, tx: Option<mpsc::Sender<Frame>>) {
    let mut st = shared.state.lock().unwrap();
    st.conn = conn;
    st.tx = tx;
    shared.conn_watch.send_replace(conn);
}

async fn establish(
    opts: &ClientOptions,
    shared: &Arc<Shared>,
    events: mpsc::UnboundedSender<Event>,
) -> Result<Connection, ClientError> {
    set_state(shared, ConnState::Registering, None);
    let (r, w) = dial(&opts.endpoint).await.map_err(ClientError::ConnectFailed)?;
    let (tx, rx) = mpsc::channel(SESSION_QUEUE);
    tokio::spawn(write_loop(w, rx));
    let (reg_tx, reg_rx) = oneshot::channel();
    let reader = tokio::spawn(run_reader(r, tx.clone(), events, reg_tx, opts.dead_after));
    let _ = tx.send(Frame::Register { name: opts.name.clone() }).await;
    let answer = match tokio::time::timeout(opts.register_timeout, reg_rx).await {
        Ok(Ok(answer)) => answer,
        Ok(Err(_)) => {
            return Err(ClientError::ConnectFailed(std::io::Error::new(
                std::io::ErrorKind::ConnectionReset,
                "broker closed during registration",
            )))
        }
        Err(_) => {
            reader.abort();
            set_state(shared, ConnState::Disconnected, None);
            return Err(ClientError::Timeout(opts.register_timeout));
        }
    };
    if let Err(reason) = answer {
        reader.abort();
        set_state(shared, ConnState::Disconnected, None);
        return Err(if reason == REASON_NAME_TAKEN {
            ClientError::NameTaken(opts.name.clone())
        } else {
            ClientError::Rejected(reason)
        });
    }
    let prefixes: Vec<String> = shared.state.lock().unwrap().prefixes.iter().cloned().collect();
    for prefix in prefixes {
        let _ = tx.send(Frame::Sub { prefix }).await;
    }
    set_state(shared, ConnState::Ready, Some(tx));
    shared.state.lock().unwrap().reader = Some(reader.abort_handle());
    Ok(Connection { reader })
}

async fn run_reader(
    r: crate::net::BoxRead,
    tx: mpsc::Sender<Frame>,
    events: mpsc::UnboundedSender<Event>,
    reg: oneshot::Sender<Result<(), String>>,
    dead_after: Duration,
) {
    let last_heard = Arc::new(Mutex::new(Instant::now()));
    let watchdog_seen = last_heard.clone();
    let mut reg = Some(reg);
    let reading = async {
        let mut frames = FrameReader::new(r);
        while let Some(frame) = frames.next().await? {
            *last_heard.lock().unwrap() = Instant::now();
            let ev = match frame {
                Frame::RegOk | Frame::RegErr { .. } => {
                    let answer = match frame {
                        Frame::RegErr { reason } => Err(reason),
                        _ => Ok(()),
                    };
                    if let Some(r) = reg.take() {
                        let _ = r.send(answer);
                    }
                    continue;
                }
                Frame::Ping => {
                    if tx.send(Frame::Pong).await.is_err() {
                        break;
                    }
                    continue;
                }
                Frame::Deliver { src, data } => Event::Direct { src, data },
                Frame::PubDeliver { topic, src, data } => Event::Publication { topic, src, data },
                Frame::ErrNoRoute { dest, .. } => Event::NoRoute { dest },
                _ => continue,
            };
            if events.send(ev).is_err() {
                break;
            }
        }
        Ok::<(), std::io::Error>(())
    };
    let watchdog = async {
        let mut tick = tokio::time::interval(Duration::from_millis(250));
        loop {
            tick.tick().await;
            if watchdog_seen.lock().unwrap().elapsed() >= dead_after {
                return;
            }
        }
    };
    tokio::select! {
        res = reading => {
            if let Err(e) = res {
                tracing::debug!(error = %e, "client read ended");
            }
        }
        () = watchdog => tracing::warn!("broker silent, dropping connection"),
    }
}

async fn supervise(opts: ClientOptions, shared: Arc<Shared>, events: mpsc::UnboundedSender<Event>, first: Connection) {
    let mut conn = first;
    loop {
        let _ = (&mut conn.reader).await;
        set_state(&shared, ConnState::Disconnected, None);
        if !opts.reconnect || events.is_closed() || shared.state.lock().unwrap().closed {
            // Dropping the last event sender ends the inbox with Disconnected.
            return;
        }
        let mut backoff = BACKOFF_START;
        conn = loop {
            tokio::time::sleep(backoff).await;
            match establish(&opts, &shared, events.clone()).await {
                Ok(c) => break c,
                Err(e) => {
                    tracing::debug!(error = %e, "reconnect failed");
                    set_state(&shared, ConnState::Disconnected, None);
                    backoff = (backoff * 2).min(BACKOFF_MAX);
                }
            }
        };
        tracing::info!(name = %opts.name, "reconnected");
    }
}
