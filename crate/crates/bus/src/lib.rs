//! Hierarchical name-routed messaging.
//!
//! Brokers form a tree. Clients attach to the nearest broker, register a
//! unique name, and exchange opaque payloads either point to point or
//! through prefix-matched topics.

pub mod broker;
pub mod check;
pub mod client;
pub mod net;
pub mod sim;
pub mod wire;

pub use broker::{Broker, BrokerConfig, LinkStats, NextHop, Output, PeerKind, SessionId};
pub use wire::{DecodeError, EncodeError, Frame, FrameBuffer};
pub use client::{connect, Client, ClientError, ClientOptions, ConnState, Event, Inbox};
pub use net::{spawn_broker, BrokerHandle, BrokerOptions, Endpoint};
