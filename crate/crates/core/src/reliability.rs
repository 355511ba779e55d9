//! Reliable (unordered) delivery over the bundle: monotone sequence IDs
//! assigned at first transmission, periodic cumulative acknowledgements, and
//! re-queueing of packets whose ACK misses the retransmission deadline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::scheduler::ScheduledPacket;
use crate::{ChannelId, LinkId, Micros, Seq};

/// The 64-bit sequence space ran out. Not expected to be reachable in
/// practice; wrap-around is a protocol error, never silent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqExhausted;

/// Peer acknowledged a sequence ID that was never sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckBeyondSent {
    pub cum: Seq,
    pub next_seq: Seq,
}

impl fmt::Display for AckBeyondSent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "peer acked {} but only {} packets were ever sent",
            self.cum, self.next_seq
        )
    }
}

/// One packet awaiting acknowledgement.
#[derive(Debug, Clone)]
pub struct SentEntry {
    pub packet: ScheduledPacket,
    pub sent_at: Micros,
    pub link_id: LinkId,
    pub rto_deadline: Micros,
}

#[derive(Debug)]
pub struct AckOutcome {
    /// Acked entries in ascending sequence order.
    pub newly_acked: Vec<(Seq, SentEntry)>,
    /// One RTT sample per distinct link, taken from that link's newest acked
    /// packet. Retransmitted packets never produce samples (Karn's rule).
    pub rtt_samples: Vec<(LinkId, u64)>,
}

/// Sender-side bookkeeping: which sequence IDs are still in flight, where,
/// and until when.
#[derive(Debug, Default)]
pub struct SendTracker {
    next_seq: Seq,
    unacked: BTreeMap<Seq, SentEntry>,
}

impl SendTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sequence ID for a first transmission. Retransmissions keep the ID the
    /// receiver already knows, so they never come through here.
    pub fn assign_seq(&mut self) -> Result<Seq, SeqExhausted> {
        if self.next_seq == Seq::MAX {
            return Err(SeqExhausted);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        Ok(seq)
    }

    pub fn next_seq(&self) -> Seq {
        self.next_seq
    }

    /// Records a transmission. For a retransmission this refreshes the
    /// deadline and carrying link of the existing sequence ID.
    pub fn on_send(
        &mut self,
        seq: Seq,
        packet: ScheduledPacket,
        link_id: LinkId,
        now: Micros,
        rto_us: u64,
    ) {
        self.unacked.insert(
            seq,
            SentEntry {
                packet,
                sent_at: now,
                link_id,
                rto_deadline: now + rto_us,
            },
        );
    }

    /// Applies a cumulative acknowledgement.
    pub fn on_ack(
        &mut self,
        cum: Seq,
        hold_delay_us: u32,
        now: Micros,
    ) -> Result<AckOutcome, AckBeyondSent> {
        if cum >= self.next_seq {
            return Err(AckBeyondSent {
                cum,
                next_seq: self.next_seq,
            });
        }
        let keep = self.unacked.split_off(&(cum + 1));
        let acked = std::mem::replace(&mut self.unacked, keep);
        let newly_acked: Vec<(Seq, SentEntry)> = acked.into_iter().collect();

        // Newest acked packet per link, ascending seq, so a later entry for
        // the same link simply overwrites an earlier one.
        let mut newest: BTreeMap<LinkId, &SentEntry> = BTreeMap::new();
        for (_, e) in newly_acked.iter() {
            newest.insert(e.link_id, e);
        }
        let rtt_samples = newest
            .into_iter()
            .filter(|(_, e)| e.packet.retransmit_count == 0)
            .filter_map(|(link, e)| {
                let rtt = now
                    .checked_sub(e.sent_at)?
                    .checked_sub(hold_delay_us as u64)?;
                (rtt > 0).then_some((link, rtt))
            })
            .collect();

        Ok(AckOutcome {
            newly_acked,
            rtt_samples,
        })
    }

    /// Removes and returns every entry whose deadline has passed, in
    /// ascending sequence order, so the caller can re-queue them.
    pub fn check_retransmit(&mut self, now: Micros) -> Vec<(Seq, SentEntry)> {
        let expired: Vec<Seq> = self
            .unacked
            .iter()
            .filter(|(_, e)| e.rto_deadline <= now)
            .map(|(s, _)| *s)
            .collect();
        expired
            .into_iter()
            .map(|s| (s, self.unacked.remove(&s).unwrap()))
            .collect()
    }

    pub fn next_deadline(&self) -> Option<Micros> {
        self.unacked.values().map(|e| e.rto_deadline).min()
    }

    pub fn unacked_len(&self) -> usize {
        self.unacked.len()
    }

    pub fn has_unacked_for_channel(&self, channel: ChannelId) -> bool {
        self.unacked.values().any(|e| e.packet.channel == channel)
    }
}

/// Data for one outgoing cumulative acknowledgement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckInfo {
    pub cum: Seq,
    pub echo_ts_us: u64,
    pub hold_delay_us: u32,
}

/// Receiver-side bookkeeping: the contiguous prefix of received sequence
/// IDs plus the sparse set beyond it.
#[derive(Debug, Default)]
pub struct RecvTracker {
    /// Highest seq such that everything at or below it was received.
    cumulative: Option<Seq>,
    received: BTreeSet<Seq>,
    last_ack_sent_at: Micros,
    bytes_since_ack: u64,
    /// Timestamp echo source: the most recently arrived DATA frame.
    newest: Option<(u64, Micros)>,
}

impl RecvTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cumulative(&self) -> Option<Seq> {
        self.cumulative
    }

    /// Registers an arrival. Returns whether the sequence ID is new;
    /// duplicates leave the tracker state unchanged apart from ACK pressure.
    pub fn on_receive(&mut self, seq: Seq, size: u64, sent_at_us: u64, now: Micros) -> bool {
        self.bytes_since_ack += size;
        self.newest = Some((sent_at_us, now));

        let next_expected = self.cumulative.map_or(0, |c| c + 1);
        if seq < next_expected || self.received.contains(&seq) {
            return false;
        }
        if seq == next_expected {
            let mut cum = seq;
            while self.received.remove(&(cum + 1)) {
                cum += 1;
            }
            self.cumulative = Some(cum);
        } else {
            self.received.insert(seq);
        }
        true
    }

    /// Emits an ACK when enough time or enough bytes have passed since the
    /// previous one.
    pub fn maybe_emit_ack(
        &mut self,
        now: Micros,
        interval_us: u64,
        bytes_threshold: u64,
    ) -> Option<AckInfo> {
        let cum = self.cumulative?;
        if self.bytes_since_ack == 0 {
            return None;
        }
        let due_by_time = now.saturating_sub(self.last_ack_sent_at) >= interval_us;
        let due_by_bytes = self.bytes_since_ack >= bytes_threshold;
        if !due_by_time && !due_by_bytes {
            return None;
        }
        let (echo_ts_us, arrived_at) = self.newest.expect("data arrived before any ack");
        self.last_ack_sent_at = now;
        self.bytes_since_ack = 0;
        Some(AckInfo {
            cum,
            echo_ts_us,
            hold_delay_us: now.saturating_sub(arrived_at).min(u32::MAX as u64) as u32,
        })
    }

    /// When the next timer-driven ACK is due, if data is pending.
    pub fn next_ack_deadline(&self, interval_us: u64) -> Option<Micros> {
        (self.bytes_since_ack > 0 && self.cumulative.is_some())
            .then(|| self.last_ack_sent_at + interval_us)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packet(retransmits: u32) -> ScheduledPacket {
        let mut p = ScheduledPacket::new(1, vec![0xab; 10], 0);
        p.retransmit_count = retransmits;
        p
    }

    #[test]
    fn seqs_are_monotone_from_zero() {
        let mut t = SendTracker::new();
        assert_eq!(t.assign_seq(), Ok(0));
        assert_eq!(t.assign_seq(), Ok(1));
        assert_eq!(t.assign_seq(), Ok(2));
    }

    #[test]
    fn seq_space_exhaustion_is_an_error() {
        let mut t = SendTracker::new();
        t.next_seq = Seq::MAX;
        assert_eq!(t.assign_seq(), Err(SeqExhausted));
    }

    #[test]
    fn retransmission_keeps_seq_and_refreshes_deadline() {
        let mut t = SendTracker::new();
        let seq = t.assign_seq().unwrap();
        t.on_send(seq, packet(0), 0, 1_000, 1_000_000);
        assert_eq!(t.next_deadline(), Some(1_001_000));
        // Same seq retransmitted later on another link.
        t.on_send(seq, packet(1), 1, 2_000_000, 1_000_000);
        assert_eq!(t.unacked_len(), 1);
        assert_eq!(t.next_deadline(), Some(3_000_000));
        assert_eq!(t.next_seq(), 1);
    }

    #[test]
    fn cumulative_ack_removes_prefix() {
        let mut t = SendTracker::new();
        for _ in 0..3 {
            let s = t.assign_seq().unwrap();
            t.on_send(s, packet(0), 0, 0, 1_000_000);
        }
        let out = t.on_ack(1, 0, 100).unwrap();
        assert_eq!(
            out.newly_acked.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert_eq!(t.unacked_len(), 1);

        // Acking the same cumulative again changes nothing.
        let out = t.on_ack(1, 0, 200).unwrap();
        assert!(out.newly_acked.is_empty());
        assert!(out.rtt_samples.is_empty());
        assert_eq!(t.unacked_len(), 1);
    }

    #[test]
    fn ack_beyond_sent_is_peer_misbehavior() {
        let mut t = SendTracker::new();
        let s = t.assign_seq().unwrap();
        t.on_send(s, packet(0), 0, 0, 1_000_000);
        assert!(t.on_ack(5, 0, 100).is_err());
    }

    #[test]
    fn rtt_sample_subtracts_holding_delay() {
        let mut t = SendTracker::new();
        let s = t.assign_seq().unwrap();
        t.on_send(s, packet(0), 0, 100_000, 1_000_000);
        let out = t.on_ack(0, 20_000, 300_000).unwrap();
        assert_eq!(out.rtt_samples, vec![(0, 180_000)]);
    }

    #[test]
    fn one_sample_per_link_from_newest_acked() {
        let mut t = SendTracker::new();
        for (link, at) in [(0u8, 0u64), (1, 10_000), (0, 50_000)] {
            let s = t.assign_seq().unwrap();
            t.on_send(s, packet(0), link, at, 1_000_000);
        }
        let out = t.on_ack(2, 0, 200_000).unwrap();
        // Link 0's newest acked packet was sent at 50 ms, link 1's at 10 ms.
        assert_eq!(out.rtt_samples, vec![(0, 150_000), (1, 190_000)]);
    }

    #[test]
    fn karn_excludes_retransmitted_packets() {
        let mut t = SendTracker::new();
        let s = t.assign_seq().unwrap();
        t.on_send(s, packet(1), 0, 0, 1_000_000);
        let out = t.on_ack(0, 0, 500_000).unwrap();
        assert_eq!(out.newly_acked.len(), 1);
        assert!(out.rtt_samples.is_empty());
    }

    #[test]
    fn retransmit_deadline_arithmetic() {
        let mut t = SendTracker::new();
        let s = t.assign_seq().unwrap();
        t.on_send(s, packet(0), 0, 0, 1_000_000);
        assert!(t.check_retransmit(900_000).is_empty());
        let expired = t.check_retransmit(1_100_000);
        assert_eq!(expired.len(), 1);
        assert_eq!(expired[0].0, 0);
        assert_eq!(t.unacked_len(), 0);
    }

    #[test]
    fn receive_in_order_advances_cumulative() {
        let mut r = RecvTracker::new();
        for s in 0..3 {
            assert!(r.on_receive(s, 10, 0, 0));
        }
        assert_eq!(r.cumulative(), Some(2));
    }

    #[test]
    fn receive_gap_then_fill() {
        let mut r = RecvTracker::new();
        assert!(r.on_receive(0, 10, 0, 0));
        assert!(r.on_receive(1, 10, 0, 0));
        assert!(r.on_receive(3, 10, 0, 0));
        assert_eq!(r.cumulative(), Some(1));
        assert!(r.on_receive(2, 10, 0, 0));
        assert_eq!(r.cumulative(), Some(3));
        assert!(r.received.is_empty());
    }

    #[test]
    fn duplicate_receive_is_idempotent() {
        let mut r = RecvTracker::new();
        r.on_receive(0, 10, 0, 0);
        assert!(r.on_receive(1, 10, 0, 0));
        let cum = r.cumulative();
        let set = r.received.clone();
        assert!(!r.on_receive(1, 10, 0, 0));
        assert_eq!(r.cumulative(), cum);
        assert_eq!(r.received, set);
    }

    #[test]
    fn ack_cadence_by_time_and_bytes() {
        // 30 ms since the previous ACK with a 25 ms interval: emit.
        let mut r = RecvTracker::new();
        r.on_receive(0, 100, 7, 1_000);
        r.last_ack_sent_at = 0;
        let ack = r.maybe_emit_ack(30_000, 25_000, 64 * 1024).unwrap();
        assert_eq!(ack.cum, 0);
        assert_eq!(ack.echo_ts_us, 7);
        assert_eq!(ack.hold_delay_us, 29_000);

        // Only 10 ms and little data: nothing.
        let mut r = RecvTracker::new();
        r.on_receive(0, 100, 0, 1_000);
        r.last_ack_sent_at = 0;
        assert_eq!(r.maybe_emit_ack(10_000, 25_000, 64 * 1024), None);

        // 64 KiB within 5 ms crosses the byte threshold.
        let mut r = RecvTracker::new();
        for s in 0..64 {
            r.on_receive(s, 1024, 0, 5_000);
        }
        r.last_ack_sent_at = 0;
        assert!(r.maybe_emit_ack(5_000, 25_000, 64 * 1024).is_some());
    }

    #[test]
    fn no_ack_without_data() {
        let mut r = RecvTracker::new();
        assert_eq!(r.maybe_emit_ack(1_000_000, 25_000, 64 * 1024), None);
        r.on_receive(0, 10, 0, 1_000_000);
        assert!(r.maybe_emit_ack(1_030_000, 25_000, 64 * 1024).is_some());
        // Emitted and nothing new since: quiet again.
        assert_eq!(r.maybe_emit_ack(2_000_000, 25_000, 64 * 1024), None);
    }
}
