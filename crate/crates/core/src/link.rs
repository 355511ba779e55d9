//! Per-link state: the characteristic-function model, the in-flight byte
//! estimator and the latency/bandwidth estimators fed by ACK feedback and
//! buffer-drain observations.
//!
//! A link is modelled by two parameters, latency and constant bandwidth.
//! Bytes handed to a link are assumed delivered `latency + size/bandwidth`
//! later; the estimator tracks how many bytes are still travelling so the
//! scheduler can predict when a *new* packet would arrive.

use crate::config::Config;
use crate::{LinkId, Micros};

/// The simple link model: everything sent arrives `latency` later, at a
/// constant drain rate of `bandwidth` bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkCharacteristic {
    pub latency_us: u64,
    /// Bytes per second. Zero makes the link unusable for scheduling.
    pub bandwidth: u64,
}

impl LinkCharacteristic {
    /// Cumulative bytes that arrive within `dt` of continuous transmission:
    /// zero before the latency elapses, then linear at the link bandwidth.
    pub fn size_at(&self, dt_us: u64) -> f64 {
        if dt_us <= self.latency_us {
            0.0
        } else {
            (dt_us - self.latency_us) as f64 * self.bandwidth as f64 / 1e6
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStatus {
    /// Usable and able to accept data.
    Ready,
    /// Usable, but the transport send buffer is currently full.
    Busy,
    /// Excluded from scheduling: transport down or repeatedly timing out.
    Failed,
}

/// Open observation window measuring how fast the transport drains its send
/// buffer while it stays backlogged.
#[derive(Debug, Clone, Copy)]
pub struct DrainWindow {
    pub window_start: Micros,
    pub bytes_drained: u64,
}

/// Error for a zero-size transmission record, which the protocol forbids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroSizeSend;

#[derive(Debug, Clone)]
pub struct LinkState {
    pub link_id: LinkId,
    /// Current two-parameter estimate of the link.
    pub char: LinkCharacteristic,
    /// Estimated bytes currently travelling over the link. Fractional so
    /// that decay does not accumulate rounding drift over long runs.
    pub in_flight_bytes: f64,
    pub last_decay_at: Micros,
    pub status: LinkStatus,
    /// Smoothed round-trip estimate; `None` until the first sample.
    srtt_us: Option<u64>,
    pub drain_window: Option<DrainWindow>,
    /// Retransmission-timeout sweeps since the last frame arrived on this
    /// link; reaching the configured limit marks the link failed.
    pub consecutive_timeouts: u32,
}

/// Weight of a new RTT sample in the smoothed estimate.
const SRTT_ALPHA: f64 = 1.0 / 8.0;
/// Ceiling for the smoothed RTT so repeated timeout suspicion cannot push
/// the estimate (and with it the RTO) into absurd territory.
const SRTT_CAP_US: u64 = 16_000_000;

impl LinkState {
    pub fn new(link_id: LinkId, cfg: &Config) -> Self {
        Self {
            link_id,
            char: LinkCharacteristic {
                latency_us: cfg.initial_latency_us,
                bandwidth: cfg.initial_bandwidth,
            },
            in_flight_bytes: 0.0,
            last_decay_at: 0,
            status: LinkStatus::Ready,
            srtt_us: None,
            drain_window: None,
            consecutive_timeouts: 0,
        }
    }

    pub fn usable(&self) -> bool {
        self.status != LinkStatus::Failed && self.char.bandwidth > 0
    }

    /// Drains the in-flight estimate at the current bandwidth for the time
    /// elapsed since the last access, clamping at zero.
    pub fn decay_in_flight(&mut self, now: Micros) {
        debug_assert!(now >= self.last_decay_at, "time went backwards");
        let elapsed = now.saturating_sub(self.last_decay_at);
        if elapsed > 0 {
            let drained = self.char.bandwidth as f64 * elapsed as f64 / 1e6;
            self.in_flight_bytes = (self.in_flight_bytes - drained).max(0.0);
            self.last_decay_at = now;
        }
    }

    /// Accounts a transmission of `size` wire bytes: decays first, then adds.
    pub fn record_sent(&mut self, size: u64, now: Micros) -> Result<(), ZeroSizeSend> {
        if size == 0 {
            return Err(ZeroSizeSend);
        }
        self.decay_in_flight(now);
        self.in_flight_bytes += size as f64;
        Ok(())
    }

    /// Estimated time until a packet of `size` bytes handed to this link now
    /// would be fully delivered: latency plus the serialization time of the
    /// packet behind everything already in flight.
    ///
    /// `None` means the link cannot be scheduled (failed or zero bandwidth);
    /// callers treat that as an infinite delivery time.
    pub fn estimated_delivery_us(&self, size: u64) -> Option<f64> {
        self.delivery_with_extra(size, 0.0)
    }

    /// Same as [`estimated_delivery_us`](Self::estimated_delivery_us) but
    /// against a hypothetical extra backlog, used by the scheduling pass
    /// which works on a scratch copy of the in-flight counters.
    pub fn delivery_with_extra(&self, size: u64, extra_in_flight: f64) -> Option<f64> {
        if !self.usable() {
            return None;
        }
        let queued = self.in_flight_bytes + extra_in_flight + size as f64;
        Some(self.char.latency_us as f64 + queued * 1e6 / self.char.bandwidth as f64)
    }

    /// Feeds one saturated-drain observation into the bandwidth estimate.
    /// The estimate only moves while the transport buffers were full; drain
    /// rate is meaningless when the sender was the bottleneck.
    pub fn update_bandwidth_estimate(
        &mut self,
        drained: u64,
        interval_us: u64,
        buffers_were_full: bool,
        alpha: f64,
    ) {
        debug_assert!(interval_us > 0);
        if !buffers_were_full || interval_us == 0 {
            return;
        }
        let sample = drained as f64 * 1e6 / interval_us as f64;
        let blended = (1.0 - alpha) * self.char.bandwidth as f64 + alpha * sample;
        self.char.bandwidth = blended.round().max(1.0) as u64;
    }

    /// Feeds one RTT sample; the first sample initializes the smoothed
    /// estimate directly. One-way latency is approximated as half the
    /// smoothed RTT, which needs no clock synchronization.
    pub fn update_latency_estimate(&mut self, rtt_sample_us: u64) {
        debug_assert!(rtt_sample_us > 0);
        let srtt = match self.srtt_us {
            None => rtt_sample_us,
            Some(prev) => {
                ((1.0 - SRTT_ALPHA) * prev as f64 + SRTT_ALPHA * rtt_sample_us as f64).round()
                    as u64
            }
        };
        let srtt = srtt.min(SRTT_CAP_US).max(1);
        self.srtt_us = Some(srtt);
        self.char.latency_us = srtt / 2;
    }

    /// Smoothed RTT, falling back to twice the latency prior before any
    /// sample has arrived.
    pub fn srtt_us(&self) -> u64 {
        self.srtt_us.unwrap_or(2 * self.char.latency_us)
    }

    /// Retransmission timeout for packets handed to this link now.
    pub fn rto_us(&self, cfg: &Config) -> u64 {
        cfg.min_rto_us.max(cfg.rto_srtt_factor * self.srtt_us())
    }

    /// A retransmission timeout fired for a packet this link carried: its
    /// latency may have grown arbitrarily, so double the estimate until
    /// fresh feedback corrects it.
    pub fn suspect_latency(&mut self) {
        let doubled = (self.srtt_us().saturating_mul(2)).min(SRTT_CAP_US);
        self.srtt_us = Some(doubled);
        self.char.latency_us = doubled / 2;
    }

    /// Transport-level reconnect: nothing is in flight any more and the old
    /// bandwidth estimate is stale, so halve it rather than trust it.
    pub fn on_reconnected(&mut self, now: Micros) {
        self.in_flight_bytes = 0.0;
        self.last_decay_at = now;
        self.char.bandwidth = (self.char.bandwidth / 2).max(1);
        self.drain_window = None;
        self.consecutive_timeouts = 0;
        self.status = LinkStatus::Ready;
    }

    /// Accumulates transport drain reports into saturated observation
    /// windows and returns a `(drained, interval)` sample once a window
    /// spans long enough. `still_backlogged` tells whether the send buffer
    /// stayed non-empty after this drain; an emptied buffer closes the
    /// window because the sender, not the link, became the bottleneck.
    pub fn note_drained(
        &mut self,
        bytes: u64,
        now: Micros,
        still_backlogged: bool,
        min_span_us: u64,
    ) -> Option<(u64, u64)> {
        let Some(mut win) = self.drain_window else {
            // First drain of a busy period: these bytes were serialized
            // before the window opens, so they must not count towards it.
            self.drain_window = still_backlogged.then_some(DrainWindow {
                window_start: now,
                bytes_drained: 0,
            });
            return None;
        };
        win.bytes_drained += bytes;
        let span = now.saturating_sub(win.window_start);
        let mut sample = None;
        if span >= min_span_us && win.bytes_drained > 0 {
            sample = Some((win.bytes_drained, span));
            win = DrainWindow {
                window_start: now,
                bytes_drained: 0,
            };
        }
        self.drain_window = still_backlogged.then_some(win);
        sample
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> Config {
        Config::default()
    }

    fn link_with(latency_us: u64, bandwidth: u64) -> LinkState {
        let mut l = LinkState::new(0, &test_cfg());
        l.char = LinkCharacteristic {
            latency_us,
            bandwidth,
        };
        l
    }

    #[test]
    fn decay_drains_at_bandwidth() {
        let mut l = link_with(100_000, 100_000);
        l.in_flight_bytes = 50_000.0;
        l.last_decay_at = 0;
        l.decay_in_flight(200_000); // 0.2 s at 100 kB/s drains 20 kB
        assert_eq!(l.in_flight_bytes, 30_000.0);
        assert_eq!(l.last_decay_at, 200_000);
    }

    #[test]
    fn decay_clamps_at_zero() {
        let mut l = link_with(100_000, 100_000);
        l.in_flight_bytes = 1_000.0;
        l.decay_in_flight(1_000_000);
        assert_eq!(l.in_flight_bytes, 0.0);
    }

    #[test]
    fn decay_zero_elapsed_is_identity() {
        let mut l = link_with(100_000, 100_000);
        l.in_flight_bytes = 12_345.0;
        l.last_decay_at = 777;
        l.decay_in_flight(777);
        assert_eq!(l.in_flight_bytes, 12_345.0);
    }

    #[test]
    fn record_sent_adds_after_decay() {
        let mut l = link_with(100_000, 100_000);
        l.record_sent(1400, 0).unwrap();
        assert_eq!(l.in_flight_bytes, 1400.0);

        // 50 kB decayed for 0.2 s then +10 kB.
        let mut l = link_with(100_000, 100_000);
        l.in_flight_bytes = 50_000.0;
        l.record_sent(10_000, 200_000).unwrap();
        assert_eq!(l.in_flight_bytes, 40_000.0);
    }

    #[test]
    fn record_sent_is_additive_at_same_instant() {
        let mut l = link_with(100_000, 100_000);
        l.record_sent(700, 5).unwrap();
        l.record_sent(700, 5).unwrap();
        assert_eq!(l.in_flight_bytes, 1400.0);
    }

    #[test]
    fn record_sent_rejects_zero() {
        let mut l = link_with(100_000, 100_000);
        assert_eq!(l.record_sent(0, 0), Err(ZeroSizeSend));
    }

    #[test]
    fn estimated_delivery_matches_simple_model() {
        // 400 ms latency, 0.7 Mbps = 87500 B/s, 1400 B idle -> 416 ms.
        let l = link_with(400_000, 87_500);
        assert_eq!(l.estimated_delivery_us(1400), Some(416_000.0));

        // Zero size, idle link -> exactly the latency.
        assert_eq!(l.estimated_delivery_us(0), Some(400_000.0));

        // 100 ms, 100 kB/s, 10 kB packet behind 20 kB in flight -> 400 ms.
        let mut l = link_with(100_000, 100_000);
        l.in_flight_bytes = 20_000.0;
        assert_eq!(l.estimated_delivery_us(10_000), Some(400_000.0));
    }

    #[test]
    fn failed_link_is_unschedulable() {
        let mut l = link_with(100_000, 100_000);
        l.status = LinkStatus::Failed;
        assert_eq!(l.estimated_delivery_us(100), None);
    }

    #[test]
    fn bandwidth_update_requires_full_buffers() {
        let mut l = link_with(100_000, 80_000);
        l.update_bandwidth_estimate(500_000, 1_000_000, false, 0.25);
        assert_eq!(l.char.bandwidth, 80_000);

        // Degenerate EWMA weight 1.0 adopts the sample outright:
        // 175000 B over 2 s = 87500 B/s.
        let mut l = link_with(100_000, 50_000);
        l.update_bandwidth_estimate(175_000, 2_000_000, true, 1.0);
        assert_eq!(l.char.bandwidth, 87_500);

        // alpha 0.25 blends: 0.75*80000 + 0.25*120000 = 90000.
        let mut l = link_with(100_000, 80_000);
        l.update_bandwidth_estimate(120_000, 1_000_000, true, 0.25);
        assert_eq!(l.char.bandwidth, 90_000);
    }

    #[test]
    fn latency_estimate_smoothing() {
        let mut l = LinkState::new(0, &test_cfg());
        l.update_latency_estimate(200_000);
        assert_eq!(l.srtt_us(), 200_000);
        assert_eq!(l.char.latency_us, 100_000);

        l.update_latency_estimate(280_000);
        assert_eq!(l.srtt_us(), 210_000);

        // A sample equal to the estimate is a fixed point.
        let mut l = LinkState::new(0, &test_cfg());
        l.update_latency_estimate(200_000);
        l.update_latency_estimate(200_000);
        assert_eq!(l.srtt_us(), 200_000);
    }

    #[test]
    fn rto_has_floor() {
        let cfg = test_cfg();
        let mut l = LinkState::new(0, &cfg);
        l.update_latency_estimate(10_000);
        assert_eq!(l.rto_us(&cfg), cfg.min_rto_us);
        l.update_latency_estimate(1_000_000);
        assert!(l.rto_us(&cfg) > cfg.min_rto_us);
        assert_eq!(l.rto_us(&cfg), 4 * l.srtt_us());
    }

    #[test]
    fn suspicion_doubles_latency() {
        let mut l = LinkState::new(0, &test_cfg());
        l.update_latency_estimate(200_000);
        l.suspect_latency();
        assert_eq!(l.srtt_us(), 400_000);
        assert_eq!(l.char.latency_us, 200_000);
    }

    #[test]
    fn drain_sampler_emits_after_min_span() {
        let mut l = link_with(0, 100_000);
        assert_eq!(l.note_drained(10_000, 0, true, 250_000), None);
        assert_eq!(l.note_drained(10_000, 100_000, true, 250_000), None);
        // Window started at the first drain; this crosses 250 ms.
        let s = l.note_drained(10_000, 300_000, true, 250_000);
        assert_eq!(s, Some((20_000, 300_000)));
        // Buffer emptied: window discarded, no stale sample later.
        assert_eq!(l.note_drained(5_000, 320_000, false, 250_000), None);
        assert!(l.drain_window.is_none());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn in_flight_never_negative(
                ops in prop::collection::vec((0u64..20_000, 0u64..500_000), 1..64),
                bw in 1u64..1_000_000,
            ) {
                let mut l = link_with(50_000, bw);
                let mut now = 0u64;
                for (size, dt) in ops {
                    now += dt;
                    if size == 0 {
                        l.decay_in_flight(now);
                    } else {
                        l.record_sent(size, now).unwrap();
                    }
                    prop_assert!(l.in_flight_bytes >= 0.0);
                }
            }

            #[test]
            fn delivery_monotone_in_size_and_backlog(
                lat in 0u64..1_000_000,
                bw in 1u64..10_000_000,
                s1 in 0u64..100_000,
                ds in 0u64..100_000,
                e1 in 0.0f64..1e6,
                de in 0.0f64..1e6,
            ) {
                let mut l = link_with(lat, bw);
                l.in_flight_bytes = e1;
                let base = l.estimated_delivery_us(s1).unwrap();
                let bigger = l.estimated_delivery_us(s1 + ds).unwrap();
                prop_assert!(bigger >= base);
                l.in_flight_bytes = e1 + de;
                let backlogged = l.estimated_delivery_us(s1).unwrap();
                prop_assert!(backlogged >= base);
            }

            /// Delivery time is the inverse of the characteristic function:
            /// by the estimated delivery time the link has drained exactly
            /// the packet plus everything that was ahead of it.
            #[test]
            fn delivery_inverts_characteristic(
                lat in 0u64..1_000_000,
                bw in 1u64..10_000_000,
                size in 1u64..100_000,
                e in 0.0f64..1e6,
            ) {
                let mut l = link_with(lat, bw);
                l.in_flight_bytes = e;
                let dt = l.estimated_delivery_us(size).unwrap();
                let arrived = l.char.size_at(dt.round() as u64);
                let expected = size as f64 + e;
                prop_assert!((arrived - expected).abs() <= expected * 1e-6 + bw as f64 / 1e6 + 1.0);
            }

            /// Decaying over a then b equals one decay over a+b.
            #[test]
            fn decay_composes(
                bw in 1u64..10_000_000,
                e in 0.0f64..1e7,
                a in 0u64..5_000_000,
                b in 0u64..5_000_000,
            ) {
                let mut split = link_with(0, bw);
                split.in_flight_bytes = e;
                split.decay_in_flight(a);
                split.decay_in_flight(a + b);

                let mut joined = link_with(0, bw);
                joined.in_flight_bytes = e;
                joined.decay_in_flight(a + b);

                let tol = 1e-6 * (e + 1.0);
                prop_assert!((split.in_flight_bytes - joined.in_flight_bytes).abs() <= tol);
            }

            /// Without the buffers-full signal the estimate is bit-identical.
            #[test]
            fn idle_drain_never_moves_estimate(
                bw in 1u64..10_000_000,
                drained in 0u64..1_000_000,
                interval in 1u64..10_000_000,
            ) {
                let mut l = link_with(10_000, bw);
                l.update_bandwidth_estimate(drained, interval, false, 0.25);
                prop_assert_eq!(l.char.bandwidth, bw);
            }
        }
    }
}
