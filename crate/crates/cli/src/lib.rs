//! Umbrella binary support: the integrated demo, the broker benchmark and the
//! bus-to-metrics bridge.

pub mod bench;
pub mod collect;
pub mod demo;
pub mod policy;
pub mod trace;
