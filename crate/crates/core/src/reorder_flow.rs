//! Ordered delivery on top of reliable-unordered transport, plus per-channel
//! window flow control in the style of the SSH-2 connection protocol.
//!
//! The reorder buffer is bundle-global, keyed by sequence ID; its size must
//! cover a retransmission timeout's worth of the fastest link, because that
//! is how long ready data can wait behind one lost packet.

use std::collections::BTreeMap;
use std::fmt;

use crate::link::LinkState;
use crate::{ChannelId, LinkId, Micros, Seq};

/// Payload plus routing metadata held until its sequence gap closes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReorderItem {
    pub channel: ChannelId,
    pub payload: Vec<u8>,
    /// Sender clock when the delivering transmission left, for latency
    /// accounting.
    pub sent_at_us: u64,
    /// Link that carried the transmission that completed this sequence ID.
    pub link_id: LinkId,
    /// Receiver clock at frame arrival.
    pub arrived_at: Micros,
}

/// Holding this insert would overflow the buffer: the flow-control windows
/// were sized wrong, which is fatal, not recoverable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapacityExceeded {
    pub seq: Seq,
    pub held_bytes: u64,
    pub capacity_bytes: u64,
}

impl fmt::Display for CapacityExceeded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "reorder buffer overflow holding seq {}: {} B held, {} B capacity",
            self.seq, self.held_bytes, self.capacity_bytes
        )
    }
}

#[derive(Debug)]
pub struct ReorderBuffer {
    next_expected: Seq,
    held: BTreeMap<Seq, ReorderItem>,
    held_bytes: u64,
    capacity_bytes: u64,
}

impl ReorderBuffer {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            next_expected: 0,
            held: BTreeMap::new(),
            held_bytes: 0,
            capacity_bytes,
        }
    }

    pub fn next_expected(&self) -> Seq {
        self.next_expected
    }

    pub fn held_bytes(&self) -> u64 {
        self.held_bytes
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Inserts one deduplicated arrival. If it closes the gap at
    /// `next_expected`, returns it plus the contiguous run it frees, in
    /// sequence order; otherwise the item is held. Sequence IDs below
    /// `next_expected` were already delivered and are ignored.
    pub fn insert(
        &mut self,
        seq: Seq,
        item: ReorderItem,
    ) -> Result<Vec<(Seq, ReorderItem)>, CapacityExceeded> {
        if seq < self.next_expected || self.held.contains_key(&seq) {
            return Ok(Vec::new());
        }
        if seq != self.next_expected {
            let new_held = self.held_bytes + item.payload.len() as u64;
            if new_held > self.capacity_bytes {
                return Err(CapacityExceeded {
                    seq,
                    held_bytes: new_held,
                    capacity_bytes: self.capacity_bytes,
                });
            }
            self.held_bytes = new_held;
            self.held.insert(seq, item);
            return Ok(Vec::new());
        }
        let mut released = vec![(seq, item)];
        self.next_expected += 1;
        while let Some(next) = self.held.remove(&self.next_expected) {
            self.held_bytes -= next.payload.len() as u64;
            released.push((self.next_expected, next));
            self.next_expected += 1;
        }
        Ok(released)
    }
}

/// Reorder capacity needed so the buffer can absorb one retransmission
/// timeout's worth of the fastest link, with a safety factor of two and a
/// 64 KiB floor for degenerate link sets.
pub fn required_capacity(rto_us: u64, links: &[LinkState]) -> u64 {
    let fastest = links.iter().map(|l| l.char.bandwidth).max().unwrap_or(0);
    let bound = 2 * (rto_us as u128) * (fastest as u128) / 1_000_000;
    (bound as u64).max(64 * 1024)
}

/// Per-channel flow-control window. `send_window` is what the peer granted
/// us; `recv_window` is what we granted the peer and are liable to buffer.
#[derive(Debug, Clone)]
pub struct ChannelWindow {
    pub channel_id: ChannelId,
    send_window: u64,
    recv_window: u64,
    initial_window: u64,
    /// Consumed bytes not yet covered by an emitted grant.
    ungranted: u64,
    granted_total: u64,
    consumed_total: u64,
}

impl ChannelWindow {
    pub fn new(channel_id: ChannelId, initial_window: u64) -> Self {
        Self {
            channel_id,
            send_window: initial_window,
            recv_window: initial_window,
            initial_window,
            ungranted: 0,
            granted_total: 0,
            consumed_total: 0,
        }
    }

    pub fn send_window(&self) -> u64 {
        self.send_window
    }

    pub fn initial_window(&self) -> u64 {
        self.initial_window
    }

    pub fn granted_total(&self) -> u64 {
        self.granted_total
    }

    pub fn consumed_total(&self) -> u64 {
        self.consumed_total
    }

    /// Takes `size` bytes out of the send window, or reports the channel
    /// blocked, leaving the window untouched.
    pub fn consume_send(&mut self, size: u64) -> bool {
        if size > self.send_window {
            return false;
        }
        self.send_window -= size;
        true
    }

    /// Applies a received WINDOW grant. The window is capped at its initial
    /// size: an honest peer grants only consumed bytes, so the cap never
    /// clips a legitimate grant, but it neutralizes duplicates that the
    /// grant-recovery path may produce after a link dies.
    pub fn apply_grant(&mut self, increment: u64) -> bool {
        let before = self.send_window;
        self.send_window = (self.send_window + increment).min(self.initial_window);
        self.send_window > before
    }

    /// Accounts bytes the local application consumed. Once half the initial
    /// window accumulated, the pending amount is turned into a grant for the
    /// peer and added back to `recv_window`.
    pub fn note_consumed(&mut self, size: u64) -> Option<u64> {
        self.consumed_total += size;
        self.ungranted += size;
        if self.ungranted < self.initial_window / 2 {
            return None;
        }
        let inc = self.ungranted;
        self.ungranted = 0;
        self.granted_total += inc;
        self.recv_window += inc;
        Some(inc)
    }

    /// Accounts payload arriving from the peer against what we granted.
    /// Returns false when the peer overran its window.
    pub fn note_received(&mut self, size: u64) -> bool {
        if size > self.recv_window {
            return false;
        }
        self.recv_window -= size;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::link::{LinkCharacteristic, LinkState};

    fn item(payload: Vec<u8>) -> ReorderItem {
        ReorderItem {
            channel: 1,
            payload,
            sent_at_us: 0,
            link_id: 0,
            arrived_at: 0,
        }
    }

    fn released_payloads(r: Vec<(Seq, ReorderItem)>) -> Vec<Vec<u8>> {
        r.into_iter().map(|(_, i)| i.payload).collect()
    }

    #[test]
    fn in_order_release_is_immediate() {
        let mut buf = ReorderBuffer::new(1024);
        let out = buf.insert(0, item(vec![0])).unwrap();
        assert_eq!(released_payloads(out), vec![vec![0]]);
        assert_eq!(buf.next_expected(), 1);
        assert_eq!(buf.held_bytes(), 0);
    }

    #[test]
    fn gap_holds_until_contiguous() {
        let mut buf = ReorderBuffer::new(1024);
        assert!(buf.insert(2, item(vec![2])).unwrap().is_empty());
        assert!(buf.insert(1, item(vec![1])).unwrap().is_empty());
        assert_eq!(buf.held_bytes(), 2);
        let out = buf.insert(0, item(vec![0])).unwrap();
        assert_eq!(
            released_payloads(out),
            vec![vec![0], vec![1], vec![2]]
        );
        assert_eq!(buf.held_bytes(), 0);
        assert_eq!(buf.next_expected(), 3);
    }

    #[test]
    fn stale_seq_is_ignored() {
        let mut buf = ReorderBuffer::new(1024);
        buf.insert(0, item(vec![0])).unwrap();
        let out = buf.insert(0, item(vec![9])).unwrap();
        assert!(out.is_empty());
        assert_eq!(buf.next_expected(), 1);
    }

    #[test]
    fn overflow_is_fatal() {
        let mut buf = ReorderBuffer::new(10);
        buf.insert(5, item(vec![0; 8])).unwrap();
        let err = buf.insert(6, item(vec![0; 8])).unwrap_err();
        assert_eq!(err.capacity_bytes, 10);
        assert_eq!(err.held_bytes, 16);
    }

    fn link_with_bw(id: u8, bandwidth: u64) -> LinkState {
        let mut l = LinkState::new(id, &Config::default());
        l.char = LinkCharacteristic {
            latency_us: 100_000,
            bandwidth,
        };
        l
    }

    #[test]
    fn capacity_bound_from_rto_and_fastest_link() {
        let links = vec![link_with_bw(0, 87_500)];
        assert_eq!(required_capacity(1_000_000, &links), 175_000);

        let links = vec![link_with_bw(0, 87_500), link_with_bw(1, 200_000)];
        assert_eq!(required_capacity(500_000, &links), 200_000);

        // Degenerate zero-bandwidth link set falls back to the floor.
        let links = vec![link_with_bw(0, 0)];
        assert_eq!(required_capacity(1_000_000, &links), 64 * 1024);
    }

    #[test]
    fn send_window_consumption() {
        let mut w = ChannelWindow::new(1, 5_000);
        assert!(w.consume_send(1_200));
        assert_eq!(w.send_window(), 3_800);

        let mut w = ChannelWindow::new(1, 1_000);
        assert!(!w.consume_send(1_200));
        assert_eq!(w.send_window(), 1_000);

        let mut w = ChannelWindow::new(1, 0);
        assert!(!w.consume_send(1));
    }

    #[test]
    fn grants_at_half_window() {
        let mut w = ChannelWindow::new(1, 131_072);
        assert_eq!(w.note_consumed(1_000), None);
        // 70 kB total consumed crosses the 64 kB half-window mark.
        assert_eq!(w.note_consumed(69_000), Some(70_000));
        assert_eq!(w.granted_total(), 70_000);
        assert_eq!(w.note_consumed(1_000), None);
    }

    #[test]
    fn grants_never_exceed_consumption() {
        let mut w = ChannelWindow::new(1, 16_384);
        let mut consumed = 0u64;
        for step in [1_000u64, 9_000, 123, 8_000, 20_000, 1] {
            consumed += step;
            w.note_consumed(step);
            assert!(w.granted_total() <= consumed);
        }
    }

    #[test]
    fn grant_cap_neutralizes_duplicates() {
        let mut w = ChannelWindow::new(1, 10_000);
        assert!(w.consume_send(10_000));
        assert!(w.apply_grant(6_000));
        // A duplicate of the same grant cannot push past the initial size.
        w.apply_grant(6_000);
        assert_eq!(w.send_window(), 10_000);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Under arbitrary arrival order and duplication the released
            /// stream is the original byte stream.
            #[test]
            fn reordering_and_dups_preserve_the_stream(
                n in 1usize..64,
                shuffle_seed in any::<u64>(),
                dup_mask in any::<u64>(),
            ) {
                let payloads: Vec<Vec<u8>> =
                    (0..n).map(|i| vec![i as u8; (i % 7) + 1]).collect();

                // Deterministic shuffle of arrival order, with duplicates.
                let mut order: Vec<usize> = (0..n).collect();
                let mut s = shuffle_seed | 1;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    order.swap(i, (s >> 33) as usize % (i + 1));
                }
                let mut arrivals: Vec<usize> = Vec::new();
                for (k, &i) in order.iter().enumerate() {
                    arrivals.push(i);
                    if dup_mask & (1 << (k % 64)) != 0 {
                        arrivals.push(i);
                    }
                }

                let mut buf = ReorderBuffer::new(u64::MAX);
                let mut out: Vec<u8> = Vec::new();
                for i in arrivals {
                    for (_, it) in buf.insert(i as Seq, item(payloads[i].clone())).unwrap() {
                        out.extend_from_slice(&it.payload);
                    }
                }
                let expected: Vec<u8> = payloads.concat();
                prop_assert_eq!(out, expected);
                prop_assert_eq!(buf.held_bytes(), 0);
            }

            /// Window conservation: grants never exceed consumption, and an
            /// honest sender with the initial-window cap never overruns the
            /// receiver's grant accounting.
            #[test]
            fn window_conservation(
                initial in 1_000u64..100_000,
                ops in prop::collection::vec((0u64..5_000, any::<bool>()), 1..128),
            ) {
                let mut sender = ChannelWindow::new(1, initial);
                let mut receiver = ChannelWindow::new(1, initial);
                let mut in_transit: Vec<u64> = Vec::new();
                let mut consumed = 0u64;

                for (size, deliver_grant_late) in ops {
                    let size = size.min(initial).max(1);
                    if sender.consume_send(size) {
                        prop_assert!(receiver.note_received(size));
                        consumed += size;
                        if let Some(inc) = receiver.note_consumed(size) {
                            in_transit.push(inc);
                        }
                    }
                    if !deliver_grant_late {
                        for inc in in_transit.drain(..) {
                            sender.apply_grant(inc);
                        }
                    }
                    prop_assert!(receiver.granted_total() <= consumed);
                    prop_assert!(sender.send_window() <= initial);
                }
            }
        }
    }
}
