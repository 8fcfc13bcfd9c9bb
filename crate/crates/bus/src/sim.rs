//! Deterministic in-memory network of brokers and clients.
//!
//! Every hop goes through the real wire codec. Each link direction is a FIFO
//! queue; a seeded scheduler picks which non-empty queue advances next, so
//! cross-link interleavings vary with the seed while per-link order holds.
//! Used by the property and acceptance suites.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broker::{Broker, BrokerConfig, LinkStats, Output, SessionId};
use crate::wire::{self, Frame};

pub type BrokerIdx = usize;
pub type ClientIdx = usize;
pub type LinkId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum End {
    Broker(BrokerIdx, SessionId),
    Client(ClientIdx),
}

#[derive(Debug)]
struct Link {
    a: End,
    b: End,
    a_to_b: VecDeque<Vec<u8>>,
    b_to_a: VecDeque<Vec<u8>>,
    up: bool,
    /// Frames written to a blackholed link vanish without either end noticing.
    blackhole: bool,
}

/// Next hop of a route, named by fabric indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hop {
    Client(ClientIdx),
    Broker(BrokerIdx),
}

/// What a simulated client observed, in arrival order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Registered,
    RegisterFailed(String),
    Direct { src: String, data: Bytes },
    Publication { topic: String, src: String, data: Bytes },
    NoRoute { dest: String },
}

#[derive(Debug)]
struct SimClient {
    broker: BrokerIdx,
    link: LinkId,
    events: Vec<ClientEvent>,
    /// A silent client ignores PING.
    silent: bool,
}

#[derive(Debug)]
struct BrokerNode {
    broker: Broker,
    next_session: SessionId,
    links: HashMap<SessionId, LinkId>,
}

/// A tree of brokers with attached clients, run step by step.
pub struct Fabric {
    rng: ChaCha8Rng,
    brokers: Vec<BrokerNode>,
    clients: Vec<SimClient>,
    links: Vec<Link>,
    parent_link: HashMap<BrokerIdx, LinkId>,
    now: Instant,
    frames_moved: u64,
}

impl Fabric {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            brokers: Vec::new(),
            clients: Vec::new(),
            links: Vec::new(),
            parent_link: HashMap::new(),
            now: Instant::now(),
            frames_moved: 0,
        }
    }

    pub fn now(&self) -> Instant {
        self.now
    }

    pub fn advance(&mut self, by: Duration) {
        self.now += by;
    }

    pub fn add_broker(&mut self, name: &str) -> BrokerIdx {
        self.add_broker_with(BrokerConfig::new(name))
    }

    pub fn add_broker_with(&mut self, config: BrokerConfig) -> BrokerIdx {
        self.brokers.push(BrokerNode { broker: Broker::new(config), next_session: 1, links: HashMap::new() });
        self.brokers.len() - 1
    }

    /// Connects `child` to `parent` and returns the new link.
    pub fn connect_broker(&mut self, child: BrokerIdx, parent: BrokerIdx) -> LinkId {
        let up_session = self.new_session(child);
        let down_session = self.new_session(parent);
        let link = self.push_link(End::Broker(child, up_session), End::Broker(parent, down_session));
        self.brokers[parent].broker.open_session(down_session, self.now);
        let out = self.brokers[child].broker.attach_parent(up_session, self.now);
        self.parent_link.insert(child, link);
        self.dispatch(child, out);
        link
    }

    pub fn add_client(&mut self, broker: BrokerIdx) -> ClientIdx {
        let session = self.new_session(broker);
        let idx = self.clients.len();
        let link = self.push_link(End::Client(idx), End::Broker(broker, session));
        self.brokers[broker].broker.open_session(session, self.now);
        self.clients.push(SimClient { broker, link, events: Vec::new(), silent: false });
        idx
    }

    pub fn register(&mut self, c: ClientIdx, name: &str) {
        self.client_send_frame(c, Frame::Register { name: name.into() });
    }

    pub fn unregister(&mut self, c: ClientIdx) {
        self.client_send_frame(c, Frame::Unregister);
    }

    pub fn send(&mut self, c: ClientIdx, dest: &str, data: impl Into<Bytes>) {
        self.client_send_frame(c, Frame::Send { dest: dest.into(), src: String::new(), data: data.into() });
    }

    pub fn publish(&mut self, c: ClientIdx, topic: &str, data: impl Into<Bytes>) {
        self.client_send_frame(c, Frame::Pub { topic: topic.into(), data: data.into() });
    }

    pub fn subscribe(&mut self, c: ClientIdx, prefix: &str) {
        self.client_send_frame(c, Frame::Sub { prefix: prefix.into() });
    }

    pub fn unsubscribe(&mut self, c: ClientIdx, prefix: &str) {
        self.client_send_frame(c, Frame::Unsub { prefix: prefix.into() });
    }

    pub fn events(&self, c: ClientIdx) -> &[ClientEvent] {
        &self.clients[c].events
    }

    pub fn take_events(&mut self, c: ClientIdx) -> Vec<ClientEvent> {
        std::mem::take(&mut self.clients[c].events)
    }

    pub fn client_broker(&self, c: ClientIdx) -> BrokerIdx {
        self.clients[c].broker
    }

    pub fn broker(&self, b: BrokerIdx) -> &Broker {
        &self.brokers[b].broker
    }

    pub fn broker_count(&self) -> usize {
        self.brokers.len()
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn set_silent(&mut self, c: ClientIdx, silent: bool) {
        self.clients[c].silent = silent;
    }

    /// Routing table of `b` in topology terms.
    pub fn route_view(&self, b: BrokerIdx) -> BTreeMap<String, Hop> {
        let node = &self.brokers[b];
        node.broker
            .routes()
            .into_iter()
            .filter_map(|(name, hop)| {
                let link = &self.links[*node.links.get(&hop.session())?];
                let far = if link.a == End::Broker(b, hop.session()) { link.b } else { link.a };
                let hop = match far {
                    End::Client(c) => Hop::Client(c),
                    End::Broker(child, _) => Hop::Broker(child),
                };
                Some((name, hop))
            })
            .collect()
    }

    /// Counters of `child`'s session toward its parent.
    pub fn parent_link_stats(&self, child: BrokerIdx) -> Option<LinkStats> {
        self.brokers[child].broker.parent_stats()
    }

    /// Total frames moved across all links so far.
    pub fn frames_moved(&self) -> u64 {
        self.frames_moved
    }

    /// Cuts a link; both ends see the session close. Queued frames are lost.
    pub fn cut(&mut self, link: LinkId) {
        if !self.links[link].up {
            return;
        }
        self.links[link].up = false;
        self.links[link].a_to_b.clear();
        self.links[link].b_to_a.clear();
        for end in [self.links[link].a, self.links[link].b] {
            if let End::Broker(b, session) = end {
                self.brokers[b].links.remove(&session);
                let out = self.brokers[b].broker.close_session(session);
                self.dispatch(b, out);
            }
        }
        self.parent_link.retain(|_, l| *l != link);
    }

    pub fn parent_link(&self, child: BrokerIdx) -> Option<LinkId> {
        self.parent_link.get(&child).copied()
    }

    /// Cuts the link between `child` and its parent.
    pub fn partition(&mut self, child: BrokerIdx) -> Option<LinkId> {
        let link = *self.parent_link.get(&child)?;
        self.cut(link);
        Some(link)
    }

    /// Silently drops everything sent on `link` from now on.
    pub fn blackhole(&mut self, link: LinkId) {
        let l = &mut self.links[link];
        l.blackhole = true;
        l.a_to_b.clear();
        l.b_to_a.clear();
    }

    pub fn disconnect_client(&mut self, c: ClientIdx) {
        let link = self.clients[c].link;
        self.cut(link);
    }

    /// Runs a heartbeat tick on every broker at the current time.
    pub fn heartbeat_tick(&mut self) -> Vec<(BrokerIdx, SessionId)> {
        let mut expired_all = Vec::new();
        for b in 0..self.brokers.len() {
            let (out, expired) = self.brokers[b].broker.heartbeat_tick(self.now);
            for &s in &expired {
                expired_all.push((b, s));
            }
            self.dispatch(b, out);
        }
        expired_all
    }

    /// Moves one frame across one link. Returns false when nothing is queued.
    pub fn step(&mut self) -> bool {
        let busy: Vec<(LinkId, bool)> = self
            .links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.up)
            .flat_map(|(i, l)| {
                let mut v = Vec::new();
                if !l.a_to_b.is_empty() {
                    v.push((i, true));
                }
                if !l.b_to_a.is_empty() {
                    v.push((i, false));
                }
                v
            })
            .collect();
        if busy.is_empty() {
            return false;
        }
        let (link, forward) = busy[self.rng.random_range(0..busy.len())];
        let l = &mut self.links[link];
        let (bytes, to) = if forward {
            (l.a_to_b.pop_front().unwrap(), l.b)
        } else {
            (l.b_to_a.pop_front().unwrap(), l.a)
        };
        let (frame, used) = wire::decode(&bytes).expect("fabric carries valid frames").expect("whole frame");
        debug_assert_eq!(used, bytes.len());
        self.frames_moved += 1;
        self.deliver(to, frame);
        true
    }

    /// Steps until every queue is empty. Returns the number of frames moved.
    pub fn run_until_quiet(&mut self) -> u64 {
        let mut moved = 0;
        while self.step() {
            moved += 1;
            assert!(moved < 50_000_000, "fabric did not quiesce");
        }
        moved
    }

    fn deliver(&mut self, to: End, frame: Frame) {
        match to {
            End::Broker(b, session) => {
                let out = self.brokers[b].broker.handle(session, frame, self.now);
                self.dispatch(b, out);
            }
            End::Client(c) => {
                let event = match frame {
                    Frame::RegOk => ClientEvent::Registered,
                    Frame::RegErr { reason } => ClientEvent::RegisterFailed(reason),
                    Frame::Deliver { src, data } => ClientEvent::Direct { src, data },
                    Frame::PubDeliver { topic, src, data } => ClientEvent::Publication { topic, src, data },
                    Frame::ErrNoRoute { dest, .. } => ClientEvent::NoRoute { dest },
                    Frame::Ping => {
                        if !self.clients[c].silent {
                            self.client_send_frame(c, Frame::Pong);
                        }
                        return;
                    }
                    _ => return,
                };
                self.clients[c].events.push(event);
            }
        }
    }

    fn dispatch(&mut self, b: BrokerIdx, out: Vec<Output>) {
        for o in out {
            match o {
                Output::Frame(session, frame) => {
                    let Some(&link) = self.brokers[b].links.get(&session) else { continue };
                    self.enqueue(link, End::Broker(b, session), &frame);
                }
                Output::Close(session) => {
                    if let Some(&link) = self.brokers[b].links.get(&session) {
                        self.cut(link);
                    }
                }
            }
        }
    }

    fn client_send_frame(&mut self, c: ClientIdx, frame: Frame) {
        let link = self.clients[c].link;
        self.enqueue(link, End::Client(c), &frame);
    }

    fn enqueue(&mut self, link: LinkId, from: End, frame: &Frame) {
        let l = &mut self.links[link];
        if !l.up || l.blackhole {
            return;
        }
        let bytes = wire::encode(frame).expect("encodable frame");
        if l.a == from {
            l.a_to_b.push_back(bytes);
        } else {
            l.b_to_a.push_back(bytes);
        }
    }

    fn new_session(&mut self, b: BrokerIdx) -> SessionId {
        let node = &mut self.brokers[b];
        let id = node.next_session;
        node.next_session += 1;
        id
    }

    fn push_link(&mut self, a: End, b: End) -> LinkId {
        let id = self.links.len();
        self.links.push(Link { a, b, a_to_b: VecDeque::new(), b_to_a: VecDeque::new(), up: true, blackhole: false });
        for end in [a, b] {
            if let End::Broker(bi, session) = end {
                self.brokers[bi].links.insert(session, id);
            }
        }
        id
    }
}
