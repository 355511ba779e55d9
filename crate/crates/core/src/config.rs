//! Protocol tuning knobs shared by both bundle endpoints.
//!
//! Both sides of a bundle must run the same configuration; none of these
//! values are negotiated on the wire.

/// Maximum DATA payload per packet, in bytes. Kept below typical MSS so a
/// frame does not fragment across common paths.
pub const DEFAULT_CHUNK_SIZE: usize = 1200;

#[derive(Debug, Clone)]
pub struct Config {
    /// Maximum payload bytes carried by one DATA frame.
    pub chunk_size: usize,
    /// Bound of the waiting queue, in packets. Must leave room for a full
    /// flow-control window of retransmissions on top of fresh data.
    pub queue_capacity: usize,
    /// Minimum interval between cumulative ACKs.
    pub ack_interval_us: u64,
    /// Receiving this many bytes since the last ACK forces one immediately.
    pub ack_bytes_threshold: u64,
    /// Floor for the retransmission timeout.
    pub min_rto_us: u64,
    /// RTO multiplier applied to the carrying link's smoothed RTT.
    pub rto_srtt_factor: u64,
    /// Per-channel flow-control window, in payload bytes.
    pub initial_window: u64,
    /// EWMA weight for bandwidth drain samples.
    pub bandwidth_alpha: f64,
    /// Minimum span of a saturated-drain observation window before it
    /// produces a bandwidth sample.
    pub bandwidth_sample_us: u64,
    /// Latency assumed for a link before any RTT feedback arrives.
    pub initial_latency_us: u64,
    /// Bandwidth assumed for a link before any drain feedback, bytes/sec.
    pub initial_bandwidth: u64,
    /// Consecutive retransmission timeouts before a link is marked failed.
    pub fail_after_timeouts: u32,
    /// Relative change of a link estimate that forces a rescheduling pass.
    pub reschedule_threshold: f64,
    /// Reorder-buffer capacity in bytes. `None` derives it from the
    /// retransmission timeout and the fastest link at bundle start.
    pub reorder_capacity: Option<u64>,
    /// Retry interval for OPEN/CLOSE control frames.
    pub control_retry_us: u64,
    /// Attempts before an unanswered OPEN is reported unreachable and an
    /// unanswered CLOSE is forced shut.
    pub control_retry_limit: u32,
    /// Emit per-packet trace records as engine events.
    pub emit_trace: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            queue_capacity: 1024,
            ack_interval_us: 25_000,
            ack_bytes_threshold: 64 * 1024,
            min_rto_us: 200_000,
            rto_srtt_factor: 4,
            initial_window: 512 * 1024,
            bandwidth_alpha: 0.25,
            bandwidth_sample_us: 250_000,
            initial_latency_us: 100_000,
            initial_bandwidth: 125_000,
            fail_after_timeouts: 3,
            reschedule_threshold: 0.10,
            reorder_capacity: None,
            control_retry_us: 500_000,
            control_retry_limit: 10,
            emit_trace: false,
        }
    }
}
