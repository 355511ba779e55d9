//! Per-packet trace records emitted by the engine, the raw material for
//! bandwidth/latency analysis of a run.

use crate::{LinkId, Micros, Seq};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEventKind {
    /// First transmission of a sequence ID.
    Sent,
    /// A retransmission left the sender.
    Retransmit,
    /// The receiver released this sequence ID to the application, in order.
    Delivered,
    /// The sender saw this sequence ID acknowledged.
    Acked,
}

impl TraceEventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceEventKind::Sent => "sent",
            TraceEventKind::Retransmit => "retransmit",
            TraceEventKind::Delivered => "delivered",
            TraceEventKind::Acked => "acked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub t_us: Micros,
    pub link_id: LinkId,
    pub event: TraceEventKind,
    pub seq: Seq,
    /// Payload bytes of the packet.
    pub size: u64,
    /// Delivery minus send time; present on delivered and acked events.
    pub latency_us: Option<u64>,
}
