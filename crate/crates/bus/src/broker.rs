//! Tree broker routing logic, independent of any transport.
//!
//! A [`Broker`] is fed decoded frames tagged with the session they arrived on
//! and answers with [`Output`]s (frames to write, sessions to close). The
//! tokio transport in [`crate::net`] and the deterministic in-memory network
//! in [`crate::sim`] both drive this same state machine.
//!
//! Names and subscription prefixes are advertised upward only. A broker knows
//! every name registered in its own subtree; anything else is sent to the
//! parent, and the root answers `ERR_NO_ROUTE`. Registration is confirmed by
//! the root of the tree, so a claim travels up as `ROUTE_ADD` and the answer
//! comes back down as `REG_OK`/`REG_ERR`, in claim order on each link.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::Serialize;

use crate::wire::Frame;

pub type SessionId = u64;

pub const DEFAULT_HEARTBEAT: Duration = Duration::from_millis(2000);
pub const DEFAULT_MISS_LIMIT: u32 = 3;

pub const REASON_NAME_TAKEN: &str = "name taken";
pub const REASON_ALREADY_REGISTERED: &str = "already registered";
pub const REASON_INVALID_NAME: &str = "invalid name";

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub name: String,
    pub heartbeat: Duration,
    pub miss_limit: u32,
}

impl BrokerConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), heartbeat: DEFAULT_HEARTBEAT, miss_limit: DEFAULT_MISS_LIMIT }
    }

    /// Silence after which a session is declared dead.
    pub fn dead_after(&self) -> Duration {
        self.heartbeat * self.miss_limit
    }
}

/// Where a name lives, relative to this broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum NextHop {
    Local(SessionId),
    Child(SessionId),
}

impl NextHop {
    pub fn session(self) -> SessionId {
        match self {
            NextHop::Local(s) | NextHop::Child(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PeerKind {
    /// Connected, has not identified itself yet.
    Pending,
    Client,
    ChildBroker,
    Parent,
}

/// Per-session frame counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub frames_in: u64,
    pub frames_out: u64,
    pub data_in: u64,
    pub data_out: u64,
}

#[derive(Debug)]
struct Session {
    kind: PeerKind,
    /// Registered name (clients only).
    name: Option<String>,
    /// Name whose claim is in flight (clients only).
    claim: Option<String>,
    peer_name: Option<String>,
    last_heard: Instant,
    stats: LinkStats,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ClaimOrigin {
    Client(SessionId),
    Child(SessionId),
    /// Re-advertisement of a name already routed here, after a parent reconnect.
    Readvertise,
}

#[derive(Debug)]
struct Claim {
    name: String,
    origin: ClaimOrigin,
}

#[derive(Debug)]
struct PendingReply {
    name: String,
    result: Option<Result<(), String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Frame(SessionId, Frame),
    Close(SessionId),
}

/// Routing state of one broker.
#[derive(Debug)]
pub struct Broker {
    config: BrokerConfig,
    sessions: HashMap<SessionId, Session>,
    parent: Option<SessionId>,
    routes: HashMap<String, NextHop>,
    subs: BTreeMap<String, BTreeSet<SessionId>>,
    claims_up: VecDeque<Claim>,
    replies: HashMap<SessionId, VecDeque<PendingReply>>,
    in_flight: HashSet<String>,
    out: Vec<Output>,
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Self {
            config,
            sessions: HashMap::new(),
            parent: None,
            routes: HashMap::new(),
            subs: BTreeMap::new(),
            claims_up: VecDeque::new(),
            replies: HashMap::new(),
            in_flight: HashSet::new(),
            out: Vec::new(),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn parent(&self) -> Option<SessionId> {
        self.parent
    }

    /// A transport accepted a new inbound connection.
    pub fn open_session(&mut self, id: SessionId, now: Instant) {
        self.sessions.insert(id, Session::new(PeerKind::Pending, now));
    }

    /// A transport established the connection to the parent broker.
    pub fn attach_parent(&mut self, id: SessionId, now: Instant) -> Vec<Output> {
        if let Some(old) = self.parent {
            if old != id {
                self.drop_session(old);
            }
        }
        self.sessions.insert(id, Session::new(PeerKind::Parent, now));
        self.parent = Some(id);
        self.emit(id, Frame::BrokerHello { name: self.config.name.clone() });
        let mut names: Vec<String> = self.routes.keys().cloned().collect();
        names.sort();
        for name in names {
            self.in_flight.insert(name.clone());
            self.claims_up.push_back(Claim { name: name.clone(), origin: ClaimOrigin::Readvertise });
            self.emit(id, Frame::RouteAdd { name });
        }
        let prefixes: Vec<String> = self.subs.keys().cloned().collect();
        for prefix in prefixes {
            self.emit(id, Frame::Sub { prefix });
        }
        self.take_output()
    }

    /// The transport lost a session (EOF, error, or heartbeat expiry).
    pub fn close_session(&mut self, id: SessionId) -> Vec<Output> {
        self.drop_session(id);
        self.take_output()
    }

    pub fn handle(&mut self, id: SessionId, frame: Frame, now: Instant) -> Vec<Output> {
        let Some(session) = self.sessions.get_mut(&id) else {
            return Vec::new();
        };
        session.last_heard = now;
        session.stats.frames_in += 1;
        if frame.is_data() {
            session.stats.data_in += 1;
        }
        let kind = session.kind;
        match kind {
            PeerKind::Pending => self.handle_pending(id, frame),
            PeerKind::Client => self.handle_client(id, frame),
            PeerKind::ChildBroker => self.handle_child(id, frame),
            PeerKind::Parent => self.handle_parent(id, frame),
        }
        self.take_output()
    }

    /// Expires sessions silent for `heartbeat * miss_limit` and pings those
    /// silent for at least one heartbeat interval.
    pub fn heartbeat_tick(&mut self, now: Instant) -> (Vec<Output>, Vec<SessionId>) {
        let dead_after = self.config.dead_after();
        let mut ids: Vec<SessionId> = self.sessions.keys().copied().collect();
        ids.sort_unstable();
        let mut expired = Vec::new();
        for id in ids {
            let s = &self.sessions[&id];
            if now.saturating_duration_since(s.last_heard) >= dead_after {
                expired.push(id);
            } else if now.saturating_duration_since(s.last_heard) >= self.config.heartbeat {
                self.emit(id, Frame::Ping);
            }
        }
        for &id in &expired {
            self.out.push(Output::Close(id));
            self.drop_session(id);
        }
        (self.take_output(), expired)
    }

    /// Publishes from the broker itself (no origin session).
    pub fn publish_local(&mut self, topic: &str, data: Bytes) -> Vec<Output> {
        let src = self.config.name.clone();
        self.publish(topic, &src, data, None);
        self.take_output()
    }

    // ----- inspection -----

    pub fn route(&self, name: &str) -> Option<NextHop> {
        self.routes.get(name).copied()
    }

    pub fn routes(&self) -> BTreeMap<String, NextHop> {
        self.routes.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn subscriptions(&self) -> BTreeMap<String, BTreeSet<SessionId>> {
        self.subs.clone()
    }

    pub fn session_kind(&self, id: SessionId) -> Option<PeerKind> {
        self.sessions.get(&id).map(|s| s.kind)
    }

    pub fn session_name(&self, id: SessionId) -> Option<&str> {
        let s = self.sessions.get(&id)?;
        s.name.as_deref().or(s.peer_name.as_deref())
    }

    pub fn sessions(&self) -> Vec<SessionId> {
        let mut ids: Vec<_> = self.sessions.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn link_stats(&self, id: SessionId) -> Option<LinkStats> {
        self.sessions.get(&id).map(|s| s.stats)
    }

    pub fn parent_stats(&self) -> Option<LinkStats> {
        self.parent.and_then(|p| self.link_stats(p))
    }

    /// Counters for every session, labelled by peer kind and name.
    pub fn stats_report(&self) -> Vec<SessionReport> {
        self.sessions()
            .into_iter()
            .map(|id| {
                let s = &self.sessions[&id];
                SessionReport {
                    session: id,
                    kind: s.kind,
                    peer: s.name.clone().or_else(|| s.peer_name.clone()),
                    stats: s.stats,
                }
            })
            .collect()
    }

    // ----- per-kind handlers -----

    fn handle_pending(&mut self, id: SessionId, frame: Frame) {
        match frame {
            Frame::Register { .. } => {
                self.set_kind(id, PeerKind::Client);
                self.handle_client(id, frame);
            }
            Frame::BrokerHello { name } => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    s.kind = PeerKind::ChildBroker;
                    s.peer_name = Some(name);
                }
                self.replies.insert(id, VecDeque::new());
            }
            Frame::Ping => self.emit(id, Frame::Pong),
            _ => {}
        }
    }

    fn handle_client(&mut self, id: SessionId, frame: Frame) {
        match frame {
            Frame::Register { name } => self.register_client(id, name),
            Frame::Unregister => self.unregister_client(id),
            Frame::Ping => self.emit(id, Frame::Pong),
            Frame::Send { dest, data, .. } => {
                if let Some(src) = self.client_name(id) {
                    self.route_send(dest, src, data, id);
                }
            }
            Frame::Pub { topic, data } => {
                if topic.is_empty() {
                    return;
                }
                if let Some(src) = self.client_name(id) {
                    self.publish(&topic, &src, data, Some(id));
                }
            }
            Frame::Sub { prefix } => {
                if self.client_name(id).is_some() {
                    self.add_subscription(prefix, id);
                }
            }
            Frame::Unsub { prefix } => self.remove_subscription(&prefix, id),
            _ => {}
        }
    }

    fn handle_child(&mut self, id: SessionId, frame: Frame) {
        match frame {
            Frame::RouteAdd { name } => self.child_claim(id, name),
            Frame::RouteDel { name } => {
                if self.routes.get(&name) == Some(&NextHop::Child(id)) {
                    self.routes.remove(&name);
                    self.withdraw_up(name);
                }
            }
            Frame::Send { dest, src, data } => self.route_send(dest, src, data, id),
            Frame::PubDeliver { topic, src, data } => self.publish(&topic, &src, data, Some(id)),
            Frame::ErrNoRoute { dest, src } => self.route_error(dest, src, id, false),
            Frame::Sub { prefix } => self.add_subscription(prefix, id),
            Frame::Unsub { prefix } => self.remove_subscription(&prefix, id),
            Frame::Ping => self.emit(id, Frame::Pong),
            _ => {}
        }
    }

    fn handle_parent(&mut self, id: SessionId, frame: Frame) {
        match frame {
            Frame::RegOk => self.claim_answered(Ok(())),
            Frame::RegErr { reason } => self.claim_answered(Err(reason)),
            Frame::Send { dest, src, data } => self.route_send(dest, src, data, id),
            Frame::PubDeliver { topic, src, data } => self.publish(&topic, &src, data, Some(id)),
            Frame::ErrNoRoute { dest, src } => self.route_error(dest, src, id, false),
            Frame::Ping => self.emit(id, Frame::Pong),
            _ => {}
        }
    }

    // ----- registration -----

    fn name_busy(&self, name: &str) -> bool {
        self.routes.contains_key(name) || self.in_flight.contains(name)
    }

    fn register_client(&mut self, id: SessionId, name: String) {
        let s = &self.sessions[&id];
        if s.name.is_some() || s.claim.is_some() {
            self.emit(id, Frame::RegErr { reason: REASON_ALREADY_REGISTERED.into() });
            return;
        }
        if name.is_empty() {
            self.emit(id, Frame::RegErr { reason: REASON_INVALID_NAME.into() });
            return;
        }
        if self.name_busy(&name) {
            self.emit(id, Frame::RegErr { reason: REASON_NAME_TAKEN.into() });
            return;
        }
        match self.parent {
            Some(parent) => {
                self.in_flight.insert(name.clone());
                self.sessions.get_mut(&id).unwrap().claim = Some(name.clone());
                self.claims_up.push_back(Claim { name: name.clone(), origin: ClaimOrigin::Client(id) });
                self.emit(parent, Frame::RouteAdd { name });
            }
            None => self.accept_client(id, name),
        }
    }

    fn accept_client(&mut self, id: SessionId, name: String) {
        self.routes.insert(name.clone(), NextHop::Local(id));
        let s = self.sessions.get_mut(&id).unwrap();
        s.name = Some(name);
        s.claim = None;
        self.emit(id, Frame::RegOk);
    }

    fn unregister_client(&mut self, id: SessionId) {
        let Some(s) = self.sessions.get_mut(&id) else { return };
        s.claim = None;
        if let Some(name) = s.name.take() {
            self.routes.remove(&name);
            self.withdraw_up(name);
        }
        self.remove_all_subscriptions(id);
    }

    fn child_claim(&mut self, id: SessionId, name: String) {
        let busy = self.name_busy(&name);
        self.replies.entry(id).or_default().push_back(PendingReply { name: name.clone(), result: None });
        if busy {
            self.resolve_reply(id, &name, Err(REASON_NAME_TAKEN.into()));
            return;
        }
        match self.parent {
            Some(parent) => {
                self.in_flight.insert(name.clone());
                self.claims_up.push_back(Claim { name: name.clone(), origin: ClaimOrigin::Child(id) });
                self.emit(parent, Frame::RouteAdd { name });
            }
            None => {
                self.routes.insert(name.clone(), NextHop::Child(id));
                self.resolve_reply(id, &name, Ok(()));
            }
        }
    }

    fn resolve_reply(&mut self, child: SessionId, name: &str, result: Result<(), String>) {
        let Some(queue) = self.replies.get_mut(&child) else { return };
        if let Some(slot) = queue.iter_mut().find(|r| r.result.is_none() && r.name == name) {
            slot.result = Some(result);
        }
        let mut ready = Vec::new();
        while queue.front().is_some_and(|r| r.result.is_some()) {
            ready.push(queue.pop_front().unwrap().result.unwrap());
        }
        for result in ready {
            let frame = match result {
                Ok(()) => Frame::RegOk,
                Err(reason) => Frame::RegErr { reason },
            };
            self.emit(child, frame);
        }
    }

    fn claim_answered(&mut self, result: Result<(), String>) {
        let Some(claim) = self.claims_up.pop_front() else { return };
        self.in_flight.remove(&claim.name);
        self.settle_claim(claim, result);
    }

    fn settle_claim(&mut self, claim: Claim, result: Result<(), String>) {
        let Claim { name, origin } = claim;
        match (origin, result) {
            (ClaimOrigin::Client(id), Ok(())) => {
                let still_wanted = self
                    .sessions
                    .get(&id)
                    .is_some_and(|s| s.claim.as_deref() == Some(name.as_str()));
                if still_wanted {
                    self.accept_client(id, name);
                } else {
                    self.withdraw_up(name);
                }
            }
            (ClaimOrigin::Client(id), Err(reason)) => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    if s.claim.as_deref() == Some(name.as_str()) {
                        s.claim = None;
                        self.emit(id, Frame::RegErr { reason });
                    }
                }
            }
            (ClaimOrigin::Child(id), Ok(())) => {
                if self.sessions.contains_key(&id) {
                    self.routes.insert(name.clone(), NextHop::Child(id));
                    self.resolve_reply(id, &name, Ok(()));
                } else {
                    self.withdraw_up(name);
                }
            }
            (ClaimOrigin::Child(id), Err(reason)) => self.resolve_reply(id, &name, Err(reason)),
            (ClaimOrigin::Readvertise, Ok(())) => {}
            (ClaimOrigin::Readvertise, Err(reason)) => {
                // The name was taken elsewhere while we were partitioned; it
                // stays reachable inside this subtree only.
                tracing::warn!(broker = %self.config.name, %name, %reason, "re-advertised name rejected by parent");
            }
        }
    }

    fn withdraw_up(&mut self, name: String) {
        if let Some(parent) = self.parent {
            self.emit(parent, Frame::RouteDel { name });
        }
    }

    // ----- point to point -----

    fn route_send(&mut self, dest: String, src: String, data: Bytes, origin: SessionId) {
        match self.routes.get(&dest).copied() {
            Some(NextHop::Local(t)) => self.emit(t, Frame::Deliver { src, data }),
            Some(NextHop::Child(c)) if c != origin => self.emit(c, Frame::Send { dest, src, data }),
            Some(NextHop::Child(_)) => self.route_error(dest, src, origin, true),
            None => match self.parent {
                Some(p) if p != origin => self.emit(p, Frame::Send { dest, src, data }),
                _ => self.route_error(dest, src, origin, true),
            },
        }
    }

    /// Steers `ERR_NO_ROUTE{dest}` back toward `src`. A locally generated
    /// error may go back down its origin link; a forwarded one may not, so a
    /// stale route cannot bounce it between two brokers.
    fn route_error(&mut self, dest: String, src: String, origin: SessionId, generated: bool) {
        let frame = Frame::ErrNoRoute { dest, src: src.clone() };
        match self.routes.get(&src).copied() {
            Some(NextHop::Local(t)) => self.emit(t, frame),
            Some(NextHop::Child(c)) if generated || c != origin => self.emit(c, frame),
            Some(NextHop::Child(_)) => {}
            None => {
                if let Some(p) = self.parent.filter(|&p| p != origin) {
                    self.emit(p, frame);
                }
            }
        }
    }

    // ----- publish / subscribe -----

    /// Sessions holding at least one prefix of `topic`.
    fn matching_subscribers(&self, topic: &str) -> BTreeSet<SessionId> {
        let mut hits = BTreeSet::new();
        let boundaries = topic.char_indices().map(|(i, _)| i).chain(std::iter::once(topic.len()));
        for end in boundaries {
            if let Some(set) = self.subs.get(&topic[..end]) {
                hits.extend(set.iter().copied());
            }
        }
        hits
    }

    fn publish(&mut self, topic: &str, src: &str, data: Bytes, origin: Option<SessionId>) {
        let origin_is_client = origin
            .and_then(|o| self.sessions.get(&o))
            .is_some_and(|s| s.kind == PeerKind::Client);
        for target in self.matching_subscribers(topic) {
            if Some(target) == origin && !origin_is_client {
                continue;
            }
            self.emit(
                target,
                Frame::PubDeliver { topic: topic.to_owned(), src: src.to_owned(), data: data.clone() },
            );
        }
        if let Some(p) = self.parent {
            if origin != Some(p) {
                self.emit(p, Frame::PubDeliver { topic: topic.to_owned(), src: src.to_owned(), data });
            }
        }
    }

    fn add_subscription(&mut self, prefix: String, who: SessionId) {
        let set = self.subs.entry(prefix.clone()).or_default();
        let first = set.is_empty();
        set.insert(who);
        if first {
            if let Some(p) = self.parent {
                self.emit(p, Frame::Sub { prefix });
            }
        }
    }

    fn remove_subscription(&mut self, prefix: &str, who: SessionId) {
        let Some(set) = self.subs.get_mut(prefix) else { return };
        if !set.remove(&who) || !set.is_empty() {
            return;
        }
        self.subs.remove(prefix);
        if let Some(p) = self.parent {
            self.emit(p, Frame::Unsub { prefix: prefix.to_owned() });
        }
    }

    fn remove_all_subscriptions(&mut self, who: SessionId) {
        let prefixes: Vec<String> =
            self.subs.iter().filter(|(_, set)| set.contains(&who)).map(|(p, _)| p.clone()).collect();
        for prefix in prefixes {
            self.remove_subscription(&prefix, who);
        }
    }

    // ----- session teardown -----

    fn drop_session(&mut self, id: SessionId) {
        let Some(session) = self.sessions.remove(&id) else { return };
        match session.kind {
            PeerKind::Pending => {}
            PeerKind::Client => {
                if let Some(name) = session.name {
                    self.routes.remove(&name);
                    self.withdraw_up(name);
                }
                self.remove_all_subscriptions(id);
            }
            PeerKind::ChildBroker => {
                self.replies.remove(&id);
                let mut lost: Vec<String> = self
                    .routes
                    .iter()
                    .filter(|(_, hop)| **hop == NextHop::Child(id))
                    .map(|(n, _)| n.clone())
                    .collect();
                lost.sort();
                for name in lost {
                    self.routes.remove(&name);
                    self.withdraw_up(name);
                }
                self.remove_all_subscriptions(id);
            }
            PeerKind::Parent => {
                self.parent = None;
                // This broker is now the root of its partition: it decides
                // every claim still waiting on the old parent.
                while let Some(claim) = self.claims_up.pop_front() {
                    self.in_flight.remove(&claim.name);
                    self.settle_claim(claim, Ok(()));
                }
            }
        }
    }

    // ----- output helpers -----

    fn client_name(&self, id: SessionId) -> Option<String> {
        self.sessions.get(&id).and_then(|s| s.name.clone())
    }

    fn set_kind(&mut self, id: SessionId, kind: PeerKind) {
        if let Some(s) = self.sessions.get_mut(&id) {
            s.kind = kind;
        }
    }

    fn emit(&mut self, id: SessionId, frame: Frame) {
        if let Some(s) = self.sessions.get_mut(&id) {
            s.stats.frames_out += 1;
            if frame.is_data() {
                s.stats.data_out += 1;
            }
            self.out.push(Output::Frame(id, frame));
        }
    }

    fn take_output(&mut self) -> Vec<Output> {
        std::mem::take(&mut self.out)
    }
}

impl Session {
    fn new(kind: PeerKind, now: Instant) -> Self {
        Self {
            kind,
            name: None,
            claim: None,
            peer_name: None,
            last_heard: now,
            stats: LinkStats::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionReport {
    pub session: SessionId,
    pub kind: PeerKind,
    pub peer: Option<String>,
    pub stats: LinkStats,
}
