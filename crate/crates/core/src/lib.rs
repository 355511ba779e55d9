//! Core protocol for fusing multiple unreliable network links into a single
//! reliable byte stream.
//!
//! The crate is transport-agnostic: [`engine::Engine`] is a deterministic
//! state machine driven by decoded frames, timer callbacks and application
//! writes. Drivers own sockets and clocks — the discrete-event simulator in
//! `linkweave-sim` and the real TCP adapter in [`transport`] both drive the
//! same engine, which is what makes every protocol behaviour reproducible
//! under test.

pub mod config;
pub mod engine;
pub mod frame;
pub mod link;
pub mod reliability;
pub mod reorder_flow;
pub mod scheduler;
pub mod trace;
pub mod transport;

/// Timestamps and durations are integer microseconds. Virtual time in the
/// simulator and monotonic process time in the TCP adapter share this unit.
pub type Micros = u64;

/// Identifies one link inside a bundle.
pub type LinkId = u8;

/// Identifies one tunnelled stream multiplexed over the bundle.
pub type ChannelId = u32;

/// Bundle-global sequence ID assigned to a packet at first transmission.
pub type Seq = u64;
