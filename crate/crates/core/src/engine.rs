//! The bundle protocol core: one deterministic state machine per endpoint,
//! owning scheduling, reliability, reordering and flow control.
//!
//! The engine performs no I/O and never reads a clock. Drivers feed it
//! decoded frames, link transitions, drain reports and timer callbacks, all
//! stamped with the current time, and pull encoded frames per link with
//! [`Engine::poll_transmit`] whenever that link's transport can accept
//! bytes. Application-facing output comes out of [`Engine::poll_event`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use crate::config::Config;
use crate::frame::{self, Frame, OPEN_OK, OPEN_REFUSED, OPEN_UNREACHABLE};
use crate::link::{LinkCharacteristic, LinkState, LinkStatus};
use crate::reliability::{RecvTracker, SendTracker};
use crate::reorder_flow::{self, ChannelWindow, ReorderBuffer, ReorderItem};
use crate::scheduler::{
    schedule_heap, schedule_round_robin, ScheduledPacket, SchedulerKind, WaitingQueue,
};
use crate::trace::{TraceEventKind, TraceRecord};
use crate::{ChannelId, LinkId, Micros, Seq};

/// Unrecoverable protocol violations. Once one occurs the engine refuses
/// further work; the driver must tear the bundle down.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    UnknownLink(LinkId),
    SeqExhausted,
    AckBeyondSent { cum: Seq, next_seq: Seq },
    FlowViolation { channel: ChannelId },
    ReorderOverflow { held_bytes: u64, capacity: u64 },
    ChannelCollision { channel: ChannelId },
    QueueOverflowOnRequeue,
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolError::UnknownLink(l) => write!(f, "frame on unknown link {l}"),
            ProtocolError::SeqExhausted => write!(f, "sequence space exhausted"),
            ProtocolError::AckBeyondSent { cum, next_seq } => {
                write!(f, "peer acked {cum}, next_seq {next_seq}")
            }
            ProtocolError::FlowViolation { channel } => {
                write!(f, "peer overran window on channel {channel}")
            }
            ProtocolError::ReorderOverflow { held_bytes, capacity } => {
                write!(f, "reorder buffer overflow: {held_bytes} of {capacity} bytes")
            }
            ProtocolError::ChannelCollision { channel } => {
                write!(f, "channel id {channel} reused with a different target")
            }
            ProtocolError::QueueOverflowOnRequeue => {
                write!(f, "waiting queue full while re-queueing a retransmission")
            }
        }
    }
}

impl std::error::Error for ProtocolError {}

/// Application-facing engine output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    /// Peer asked to open a channel towards `target`; the driver must
    /// eventually call [`Engine::accept_channel`].
    ChannelOpenRequest { channel: ChannelId, target: String },
    /// Result for a locally opened channel.
    ChannelOpenResult { channel: ChannelId, code: u8 },
    /// Ordered payload for the application.
    ChannelData { channel: ChannelId, bytes: Vec<u8> },
    /// A previously blocked channel can accept writes again.
    ChannelWritable { channel: ChannelId },
    ChannelClosed { channel: ChannelId },
    Trace(TraceRecord),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EngineStats {
    pub data_frames_sent: u64,
    pub payload_bytes_sent: u64,
    pub payload_bytes_delivered: u64,
    pub retransmits: u64,
    pub acks_sent: u64,
    pub scheduling_passes: u64,
}

/// Local channel refusal reasons for [`Engine::open_channel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenError {
    /// Admitting another window would overrun the reorder buffer.
    WindowBudgetExhausted,
    ChannelIdsExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ChannelPhase {
    /// Locally opened, OPEN sent, awaiting OPEN_RESULT.
    Opening { next_retry: Micros, attempts: u32 },
    /// Peer's OPEN surfaced to the driver, awaiting accept_channel.
    OpenRequested,
    Open,
    /// Locally closed; flushing queued and unacked data before CLOSE.
    Draining,
    /// CLOSE sent, awaiting the peer's CLOSE.
    ClosingSent { next_retry: Micros, attempts: u32 },
    Closed,
}

#[derive(Debug)]
struct UnconfirmedGrant {
    increment: u64,
    /// Cumulative bytes the peer could have sent without this grant; the
    /// peer exceeding it proves delivery.
    limit_before: u64,
    link: Option<LinkId>,
}

#[derive(Debug)]
struct Channel {
    win: ChannelWindow,
    phase: ChannelPhase,
    target: String,
    /// Cached OPEN_RESULT code so duplicate OPENs are answered identically.
    result_code: Option<u8>,
    /// The channel refused a write; emit ChannelWritable when it can move.
    blocked: bool,
    /// Payload bytes released towards the application, receiver side.
    released_total: u64,
    /// WINDOW grants ride one link so delivery confirmation stays ordered.
    grant_link: Option<LinkId>,
    unconfirmed_grants: VecDeque<UnconfirmedGrant>,
}

impl Channel {
    fn new(channel: ChannelId, initial_window: u64, target: String, phase: ChannelPhase) -> Self {
        Self {
            win: ChannelWindow::new(channel, initial_window),
            phase,
            target,
            result_code: None,
            blocked: false,
            released_total: 0,
            grant_link: None,
            unconfirmed_grants: VecDeque::new(),
        }
    }

    fn is_terminal(&self) -> bool {
        self.phase == ChannelPhase::Closed
    }
}

#[derive(Debug)]
struct LinkEntry {
    state: LinkState,
    /// Control frames (ACK, OPEN, OPEN_RESULT, WINDOW, CLOSE) bound to this
    /// link, sent ahead of data.
    ctrl: VecDeque<Frame>,
    transport_up: bool,
}

pub struct Engine {
    cfg: Config,
    scheduler_kind: SchedulerKind,
    links: BTreeMap<LinkId, LinkEntry>,
    queue: WaitingQueue,
    send: SendTracker,
    recv: RecvTracker,
    reorder: ReorderBuffer,
    channels: BTreeMap<ChannelId, Channel>,
    next_channel: ChannelId,
    /// Control frames waiting for any link to come up.
    pending_ctrl: VecDeque<Frame>,
    out_events: VecDeque<EngineEvent>,
    needs_schedule: bool,
    /// Sends/acks/updates since the last pass; a ready link with nothing
    /// assigned only forces a fresh pass when something actually changed.
    events_since_schedule: u64,
    /// Estimates the last pass was computed with, for drift detection.
    sched_snapshot: BTreeMap<LinkId, LinkCharacteristic>,
    rr_offset: usize,
    fatal: Option<ProtocolError>,
    stats: EngineStats,
}

impl Engine {
    pub fn new(cfg: Config, scheduler_kind: SchedulerKind) -> Self {
        assert!(cfg.chunk_size >= 1 && cfg.chunk_size <= frame::MAX_PAYLOAD);
        let reorder_capacity = cfg.reorder_capacity.unwrap_or_else(|| {
            // Before any feedback the retransmission timeout derives from the
            // latency prior; the capacity must also fit the window budget.
            let prior = LinkState::new(0, &cfg);
            let rto = prior.rto_us(&cfg);
            reorder_flow::required_capacity(rto, &[prior]).max(2 * cfg.initial_window)
        });
        Self {
            queue: WaitingQueue::new(cfg.queue_capacity),
            reorder: ReorderBuffer::new(reorder_capacity),
            cfg,
            scheduler_kind,
            links: BTreeMap::new(),
            send: SendTracker::new(),
            recv: RecvTracker::new(),
            channels: BTreeMap::new(),
            next_channel: 1,
            pending_ctrl: VecDeque::new(),
            out_events: VecDeque::new(),
            needs_schedule: false,
            events_since_schedule: 0,
            sched_snapshot: BTreeMap::new(),
            rr_offset: 0,
            fatal: None,
            stats: EngineStats::default(),
        }
    }

    pub fn add_link(&mut self, link: LinkId, now: Micros) {
        let mut state = LinkState::new(link, &self.cfg);
        state.last_decay_at = now;
        self.links.insert(
            link,
            LinkEntry {
                state,
                ctrl: VecDeque::new(),
                transport_up: true,
            },
        );
        self.needs_schedule = true;
    }

    pub fn has_link(&self, link: LinkId) -> bool {
        self.links.contains_key(&link)
    }

    pub fn link_ids(&self) -> Vec<LinkId> {
        self.links.keys().copied().collect()
    }

    pub fn fatal_error(&self) -> Option<&ProtocolError> {
        self.fatal.as_ref()
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn unacked_len(&self) -> usize {
        self.send.unacked_len()
    }

    pub fn held_bytes(&self) -> u64 {
        self.reorder.held_bytes()
    }

    pub fn reorder_capacity(&self) -> u64 {
        self.reorder.capacity_bytes()
    }

    /// The reorder bound the current estimates call for: the largest current
    /// per-link RTO times the fastest estimated link.
    pub fn required_reorder_capacity(&self) -> u64 {
        let states: Vec<LinkState> = self.links.values().map(|e| e.state.clone()).collect();
        let rto = states
            .iter()
            .map(|l| l.rto_us(&self.cfg))
            .max()
            .unwrap_or(self.cfg.min_rto_us);
        reorder_flow::required_capacity(rto, &states)
    }

    pub fn link_state(&self, link: LinkId) -> Option<&LinkState> {
        self.links.get(&link).map(|e| &e.state)
    }

    /// `(granted_total, consumed_total)` of a channel's receive side.
    pub fn channel_flow_totals(&self, channel: ChannelId) -> Option<(u64, u64)> {
        self.channels
            .get(&channel)
            .map(|c| (c.win.granted_total(), c.win.consumed_total()))
    }

    pub fn channel_is_open(&self, channel: ChannelId) -> bool {
        matches!(
            self.channels.get(&channel).map(|c| &c.phase),
            Some(ChannelPhase::Open)
        )
    }

    pub fn channel_is_closed(&self, channel: ChannelId) -> bool {
        self.channels
            .get(&channel)
            .map(|c| c.is_terminal())
            .unwrap_or(true)
    }

    pub fn poll_event(&mut self) -> Option<EngineEvent> {
        self.out_events.pop_front()
    }

    // ------------------------------------------------------------------
    // Link lifecycle
    // ------------------------------------------------------------------

    pub fn on_link_up(&mut self, link: LinkId, now: Micros, reconnected: bool) {
        let Some(entry) = self.links.get_mut(&link) else {
            return;
        };
        entry.transport_up = true;
        if reconnected {
            entry.state.on_reconnected(now);
        } else {
            entry.state.status = LinkStatus::Ready;
        }
        while let Some(f) = self.pending_ctrl.pop_front() {
            if let Frame::Window { channel, .. } = &f {
                // Parked grants become owned by this link.
                if let Some(ch) = self.channels.get_mut(channel) {
                    for g in ch.unconfirmed_grants.iter_mut() {
                        if g.link.is_none() {
                            g.link = Some(link);
                        }
                    }
                    ch.grant_link = Some(link);
                }
            }
            self.links.get_mut(&link).unwrap().ctrl.push_back(f);
        }
        self.needs_schedule = true;
    }

    pub fn on_link_down(&mut self, link: LinkId, now: Micros) {
        let _ = now;
        let Some(entry) = self.links.get_mut(&link) else {
            return;
        };
        entry.transport_up = false;
        entry.state.status = LinkStatus::Failed;
        entry.state.drain_window = None;
        // Queued-but-unsent control frames are dropped: ACKs are superseded,
        // OPEN/CLOSE ride their retry timers, and grants are re-issued from
        // the unconfirmed set below. Unacked data recovers via RTO.
        entry.ctrl.clear();
        let channels: Vec<ChannelId> = self.channels.keys().copied().collect();
        for id in channels {
            let ch = self.channels.get_mut(&id).unwrap();
            if ch.grant_link == Some(link) {
                ch.grant_link = None;
            }
            // Grants possibly lost with the link: re-issue on another link.
            // Duplicates are harmless because the peer caps its window at
            // the initial size.
            let to_reissue: Vec<u64> = ch
                .unconfirmed_grants
                .iter_mut()
                .filter(|g| g.link == Some(link))
                .map(|g| {
                    g.link = None;
                    g.increment
                })
                .collect();
            for inc in to_reissue {
                let carrier = self.queue_ctrl(Frame::Window {
                    channel: id,
                    increment: inc.min(u32::MAX as u64) as u32,
                });
                let ch = self.channels.get_mut(&id).unwrap();
                ch.grant_link = carrier;
                for g in ch.unconfirmed_grants.iter_mut() {
                    if g.link.is_none() {
                        g.link = carrier;
                        break;
                    }
                }
            }
        }
        self.needs_schedule = true;
    }

    /// Transport drained `bytes` from this link's send buffer. Produces a
    /// bandwidth sample once drains cover a long enough saturated span.
    pub fn on_link_drained(&mut self, link: LinkId, bytes: u64, now: Micros, backlogged: bool) {
        let Some(entry) = self.links.get_mut(&link) else {
            return;
        };
        let sample =
            entry
                .state
                .note_drained(bytes, now, backlogged, self.cfg.bandwidth_sample_us);
        if let Some((drained, interval)) = sample {
            entry
                .state
                .update_bandwidth_estimate(drained, interval, true, self.cfg.bandwidth_alpha);
            self.note_estimate_drift(link);
        }
    }

    // ------------------------------------------------------------------
    // Frame input
    // ------------------------------------------------------------------

    pub fn handle_frame(&mut self, link: LinkId, frame: Frame, now: Micros) -> Result<(), ProtocolError> {
        if let Some(err) = &self.fatal {
            return Err(err.clone());
        }
        if !self.links.contains_key(&link) {
            return self.fail(ProtocolError::UnknownLink(link));
        }
        // Any arrival proves the link alive; a timeout-failed link earns
        // another chance.
        {
            let entry = self.links.get_mut(&link).unwrap();
            entry.state.consecutive_timeouts = 0;
            if entry.transport_up && entry.state.status == LinkStatus::Failed {
                entry.state.status = LinkStatus::Ready;
                self.needs_schedule = true;
            }
        }

        match frame {
            Frame::Data {
                channel,
                seq,
                sent_at_us,
                payload,
            } => self.on_data(link, channel, seq, sent_at_us, payload, now),
            Frame::Ack {
                cum_seq,
                echo_ts_us: _,
                hold_delay_us,
            } => self.on_ack(cum_seq, hold_delay_us, now),
            Frame::Open { channel, target } => self.on_open(channel, target, now),
            Frame::OpenResult { channel, code } => self.on_open_result(channel, code, now),
            Frame::Window { channel, increment } => {
                self.on_window(channel, increment as u64);
                Ok(())
            }
            Frame::Close { channel } => self.on_close_frame(channel, now),
            // Bundle association happens in the transport layer; an engine
            // seeing HELLO simply ignores it.
            Frame::Hello { .. } => Ok(()),
        }
    }

    fn on_data(
        &mut self,
        link: LinkId,
        channel: ChannelId,
        seq: Seq,
        sent_at_us: u64,
        payload: Vec<u8>,
        now: Micros,
    ) -> Result<(), ProtocolError> {
        let size = payload.len() as u64;
        let is_new = self.recv.on_receive(seq, size, sent_at_us, now);
        if is_new {
            if let Some(ch) = self.channels.get_mut(&channel) {
                if !ch.is_terminal() && !ch.win.note_received(size) {
                    return self.fail(ProtocolError::FlowViolation { channel });
                }
            }
            let item = ReorderItem {
                channel,
                payload,
                sent_at_us,
                link_id: link,
                arrived_at: now,
            };
            match self.reorder.insert(seq, item) {
                Ok(released) => {
                    for (rseq, it) in released {
                        self.deliver_released(rseq, it, now);
                    }
                }
                Err(e) => {
                    return self.fail(ProtocolError::ReorderOverflow {
                        held_bytes: e.held_bytes,
                        capacity: e.capacity_bytes,
                    });
                }
            }
        }
        self.flush_ack(now);
        Ok(())
    }

    fn deliver_released(&mut self, seq: Seq, item: ReorderItem, now: Micros) {
        let size = item.payload.len() as u64;
        self.stats.payload_bytes_delivered += size;
        self.trace(TraceRecord {
            t_us: now,
            link_id: item.link_id,
            event: TraceEventKind::Delivered,
            seq,
            size,
            latency_us: now.checked_sub(item.sent_at_us),
        });
        let Some(ch) = self.channels.get_mut(&item.channel) else {
            return; // Channel already gone; late retransmission.
        };
        if ch.is_terminal() {
            return;
        }
        ch.released_total += size;
        // The peer sending past a grant's pre-delivery limit proves that
        // grant (and, FIFO per link, all earlier ones) arrived.
        while let Some(front) = ch.unconfirmed_grants.front() {
            if ch.released_total > front.limit_before {
                ch.unconfirmed_grants.pop_front();
            } else {
                break;
            }
        }
        self.out_events.push_back(EngineEvent::ChannelData {
            channel: item.channel,
            bytes: item.payload,
        });
    }

    fn on_ack(&mut self, cum: Seq, hold_delay_us: u32, now: Micros) -> Result<(), ProtocolError> {
        let outcome = match self.send.on_ack(cum, hold_delay_us, now) {
            Ok(o) => o,
            Err(e) => {
                return self.fail(ProtocolError::AckBeyondSent {
                    cum: e.cum,
                    next_seq: e.next_seq,
                });
            }
        };
        for (link, rtt) in &outcome.rtt_samples {
            if let Some(entry) = self.links.get_mut(link) {
                entry.state.update_latency_estimate(*rtt);
            }
            self.note_estimate_drift(*link);
        }
        if !outcome.newly_acked.is_empty() {
            self.events_since_schedule += 1;
        }
        let mut touched_channels: Vec<ChannelId> = Vec::new();
        for (seq, entry) in &outcome.newly_acked {
            if let Some(e) = self.links.get_mut(&entry.link_id) {
                e.state.consecutive_timeouts = 0;
            }
            self.trace(TraceRecord {
                t_us: now,
                link_id: entry.link_id,
                event: TraceEventKind::Acked,
                seq: *seq,
                size: entry.packet.payload.len() as u64,
                latency_us: now.checked_sub(entry.sent_at),
            });
            if !touched_channels.contains(&entry.packet.channel) {
                touched_channels.push(entry.packet.channel);
            }
        }
        for ch in touched_channels {
            self.try_emit_close(ch, now);
        }
        Ok(())
    }

    fn on_open(&mut self, channel: ChannelId, target: String, now: Micros) -> Result<(), ProtocolError> {
        let _ = now;
        match self.channels.get(&channel) {
            None => {
                if !self.window_budget_allows() {
                    // Refuse rather than shrink: both sides must agree on
                    // window sizes and there is no field to negotiate them.
                    let mut ch = Channel::new(
                        channel,
                        self.cfg.initial_window,
                        target,
                        ChannelPhase::Closed,
                    );
                    ch.result_code = Some(OPEN_REFUSED);
                    self.channels.insert(channel, ch);
                    self.queue_ctrl(Frame::OpenResult {
                        channel,
                        code: OPEN_REFUSED,
                    });
                    return Ok(());
                }
                let ch = Channel::new(
                    channel,
                    self.cfg.initial_window,
                    target.clone(),
                    ChannelPhase::OpenRequested,
                );
                self.channels.insert(channel, ch);
                self.out_events
                    .push_back(EngineEvent::ChannelOpenRequest { channel, target });
                Ok(())
            }
            Some(existing) => {
                if existing.target != target {
                    return self.fail(ProtocolError::ChannelCollision { channel });
                }
                // Duplicate OPEN: repeat the decision if one was made.
                if let Some(code) = existing.result_code {
                    self.queue_ctrl(Frame::OpenResult { channel, code });
                }
                Ok(())
            }
        }
    }

    fn on_open_result(&mut self, channel: ChannelId, code: u8, now: Micros) -> Result<(), ProtocolError> {
        let _ = now;
        let Some(ch) = self.channels.get_mut(&channel) else {
            return Ok(());
        };
        if !matches!(ch.phase, ChannelPhase::Opening { .. }) {
            return Ok(()); // Duplicate result.
        }
        if code == OPEN_OK {
            ch.phase = ChannelPhase::Open;
        } else {
            ch.phase = ChannelPhase::Closed;
        }
        self.out_events
            .push_back(EngineEvent::ChannelOpenResult { channel, code });
        Ok(())
    }

    fn on_window(&mut self, channel: ChannelId, increment: u64) {
        let Some(ch) = self.channels.get_mut(&channel) else {
            return;
        };
        if ch.is_terminal() {
            return;
        }
        let grew = ch.win.apply_grant(increment);
        if grew && ch.blocked {
            ch.blocked = false;
            self.out_events
                .push_back(EngineEvent::ChannelWritable { channel });
        }
    }

    fn on_close_frame(&mut self, channel: ChannelId, now: Micros) -> Result<(), ProtocolError> {
        let _ = now;
        let Some(ch) = self.channels.get_mut(&channel) else {
            return Ok(()); // Unknown channel: stale CLOSE, ignore.
        };
        match ch.phase {
            ChannelPhase::Closed => Ok(()), // Already answered once.
            ChannelPhase::ClosingSent { .. } => {
                // Peer's CLOSE answers ours; the handshake is complete.
                ch.phase = ChannelPhase::Closed;
                self.out_events
                    .push_back(EngineEvent::ChannelClosed { channel });
                Ok(())
            }
            _ => {
                ch.phase = ChannelPhase::Closed;
                self.queue_ctrl(Frame::Close { channel });
                self.out_events
                    .push_back(EngineEvent::ChannelClosed { channel });
                Ok(())
            }
        }
    }

    // ------------------------------------------------------------------
    // Application input
    // ------------------------------------------------------------------

    /// Opens a channel towards `target`. The result arrives asynchronously
    /// as [`EngineEvent::ChannelOpenResult`].
    pub fn open_channel(&mut self, target: &str, now: Micros) -> Result<ChannelId, OpenError> {
        if !self.window_budget_allows() {
            return Err(OpenError::WindowBudgetExhausted);
        }
        let channel = self.next_channel;
        self.next_channel = self
            .next_channel
            .checked_add(1)
            .ok_or(OpenError::ChannelIdsExhausted)?;
        let ch = Channel::new(
            channel,
            self.cfg.initial_window,
            target.to_owned(),
            ChannelPhase::Opening {
                next_retry: now + self.cfg.control_retry_us,
                attempts: 1,
            },
        );
        self.channels.insert(channel, ch);
        self.queue_ctrl(Frame::Open {
            channel,
            target: target.to_owned(),
        });
        Ok(channel)
    }

    /// Answers a [`EngineEvent::ChannelOpenRequest`].
    pub fn accept_channel(&mut self, channel: ChannelId, code: u8, now: Micros) {
        let _ = now;
        let Some(ch) = self.channels.get_mut(&channel) else {
            return;
        };
        if ch.phase != ChannelPhase::OpenRequested {
            return;
        }
        ch.result_code = Some(code);
        ch.phase = if code == OPEN_OK {
            ChannelPhase::Open
        } else {
            ChannelPhase::Closed
        };
        self.queue_ctrl(Frame::OpenResult { channel, code });
    }

    /// Feeds application bytes into a channel, returning how many were
    /// accepted. Zero means the channel is blocked on flow control or queue
    /// capacity; a [`EngineEvent::ChannelWritable`] will follow when it can
    /// make progress again.
    pub fn channel_send(&mut self, channel: ChannelId, data: &[u8], now: Micros) -> usize {
        if self.fatal.is_some() {
            return 0;
        }
        let Some(ch) = self.channels.get_mut(&channel) else {
            return 0;
        };
        if ch.phase != ChannelPhase::Open {
            return 0;
        }
        let chunk = self.cfg.chunk_size;
        let mut accepted = 0usize;
        while accepted < data.len() {
            let window = ch.win.send_window();
            let n = chunk.min(data.len() - accepted).min(window as usize);
            if n == 0 {
                ch.blocked = true;
                break;
            }
            if self.queue.len() >= self.queue.capacity() {
                ch.blocked = true;
                break;
            }
            assert!(ch.win.consume_send(n as u64));
            let was_empty = self.queue.is_empty();
            let packet = ScheduledPacket::new(
                channel,
                data[accepted..accepted + n].to_vec(),
                now,
            );
            self.queue
                .enqueue(packet)
                .expect("capacity checked above");
            if was_empty {
                self.needs_schedule = true;
            }
            accepted += n;
        }
        accepted
    }

    /// The application consumed `bytes` of previously delivered channel
    /// data; replenishes the peer's window once half of it accumulated.
    pub fn mark_consumed(&mut self, channel: ChannelId, bytes: u64, now: Micros) {
        let _ = now;
        let Some(ch) = self.channels.get_mut(&channel) else {
            return;
        };
        if ch.is_terminal() {
            return;
        }
        let Some(increment) = ch.win.note_consumed(bytes) else {
            return;
        };
        let limit_before = ch.win.initial_window() + ch.win.granted_total() - increment;
        let preferred = ch.grant_link;
        let carrier = match preferred {
            Some(l) if self.link_usable_for_ctrl(l) => {
                self.links.get_mut(&l).unwrap().ctrl.push_back(Frame::Window {
                    channel,
                    increment: increment.min(u32::MAX as u64) as u32,
                });
                Some(l)
            }
            _ => self.queue_ctrl(Frame::Window {
                channel,
                increment: increment.min(u32::MAX as u64) as u32,
            }),
        };
        let ch = self.channels.get_mut(&channel).unwrap();
        ch.grant_link = carrier;
        ch.unconfirmed_grants.push_back(UnconfirmedGrant {
            increment,
            limit_before,
            link: carrier,
        });
    }

    /// Closes a channel. Queued and unacknowledged data is flushed first;
    /// the CLOSE frame follows once the peer has acknowledged everything.
    pub fn channel_close(&mut self, channel: ChannelId, now: Micros) {
        let Some(ch) = self.channels.get_mut(&channel) else {
            return;
        };
        match ch.phase {
            ChannelPhase::Open => {
                ch.phase = ChannelPhase::Draining;
                self.try_emit_close(channel, now);
            }
            ChannelPhase::Opening { .. } | ChannelPhase::OpenRequested => {
                ch.phase = ChannelPhase::Closed;
                self.queue_ctrl(Frame::Close { channel });
            }
            _ => {}
        }
    }

    fn try_emit_close(&mut self, channel: ChannelId, now: Micros) {
        let Some(ch) = self.channels.get(&channel) else {
            return;
        };
        if ch.phase != ChannelPhase::Draining {
            return;
        }
        if self.queue.has_packets_for_channel(channel)
            || self.send.has_unacked_for_channel(channel)
        {
            return;
        }
        self.queue_ctrl(Frame::Close { channel });
        let ch = self.channels.get_mut(&channel).unwrap();
        ch.phase = ChannelPhase::ClosingSent {
            next_retry: now + self.cfg.control_retry_us,
            attempts: 1,
        };
    }

    // ------------------------------------------------------------------
    // Timers
    // ------------------------------------------------------------------

    /// The next instant at which [`Engine::on_timeout`] wants to run.
    pub fn next_timeout(&self) -> Option<Micros> {
        let mut next = self.recv.next_ack_deadline(self.cfg.ack_interval_us);
        let mut fold = |d: Option<Micros>| {
            next = match (next, d) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        };
        fold(self.send.next_deadline());
        for ch in self.channels.values() {
            match ch.phase {
                ChannelPhase::Opening { next_retry, .. }
                | ChannelPhase::ClosingSent { next_retry, .. } => fold(Some(next_retry)),
                _ => {}
            }
        }
        next
    }

    pub fn on_timeout(&mut self, now: Micros) {
        if self.fatal.is_some() {
            return;
        }
        self.flush_ack(now);
        self.run_retransmits(now);
        self.run_channel_retries(now);
    }

    fn run_retransmits(&mut self, now: Micros) {
        let expired = self.send.check_retransmit(now);
        if expired.is_empty() {
            return;
        }
        let mut suspected: Vec<LinkId> = Vec::new();
        for (_, entry) in &expired {
            if !suspected.contains(&entry.link_id) {
                suspected.push(entry.link_id);
            }
        }
        for link in suspected {
            if let Some(e) = self.links.get_mut(&link) {
                e.state.suspect_latency();
                e.state.consecutive_timeouts += 1;
                if e.state.consecutive_timeouts >= self.cfg.fail_after_timeouts {
                    e.state.status = LinkStatus::Failed;
                }
            }
            self.note_estimate_drift(link);
        }
        self.stats.retransmits += expired.len() as u64;
        // Oldest data must end up frontmost, so walk the expired set (which
        // is in ascending seq order) backwards.
        for (seq, entry) in expired.into_iter().rev() {
            let mut packet = entry.packet;
            packet.seq = Some(seq);
            packet.retransmit_count += 1;
            packet.assigned_link = None;
            if self.queue.requeue_front(packet).is_err() {
                let _ = self.fail::<()>(ProtocolError::QueueOverflowOnRequeue);
                return;
            }
        }
        self.needs_schedule = true;
    }

    fn run_channel_retries(&mut self, now: Micros) {
        let ids: Vec<ChannelId> = self.channels.keys().copied().collect();
        for id in ids {
            let ch = self.channels.get_mut(&id).unwrap();
            match &mut ch.phase {
                ChannelPhase::Opening {
                    next_retry,
                    attempts,
                } if *next_retry <= now => {
                    if *attempts >= self.cfg.control_retry_limit {
                        ch.phase = ChannelPhase::Closed;
                        self.out_events.push_back(EngineEvent::ChannelOpenResult {
                            channel: id,
                            code: OPEN_UNREACHABLE,
                        });
                    } else {
                        *attempts += 1;
                        *next_retry = now + self.cfg.control_retry_us;
                        let target = ch.target.clone();
                        self.queue_ctrl(Frame::Open {
                            channel: id,
                            target,
                        });
                    }
                }
                ChannelPhase::ClosingSent {
                    next_retry,
                    attempts,
                } if *next_retry <= now => {
                    if *attempts >= self.cfg.control_retry_limit {
                        ch.phase = ChannelPhase::Closed;
                        self.out_events
                            .push_back(EngineEvent::ChannelClosed { channel: id });
                    } else {
                        *attempts += 1;
                        *next_retry = now + self.cfg.control_retry_us;
                        self.queue_ctrl(Frame::Close { channel: id });
                    }
                }
                ChannelPhase::Draining => self.try_emit_close(id, now),
                _ => {}
            }
        }
    }

    // ------------------------------------------------------------------
    // Transmission
    // ------------------------------------------------------------------

    /// Hands out the next frame for `link`, encoded, with wire size at most
    /// `budget`. Control frames go first; data follows the current schedule.
    /// `None` means this link has nothing it may send right now.
    pub fn poll_transmit(&mut self, link: LinkId, budget: usize, now: Micros) -> Option<Vec<u8>> {
        if self.fatal.is_some() {
            return None;
        }
        let entry = self.links.get_mut(&link)?;
        if !entry.transport_up {
            return None;
        }

        // Control first: tiny and latency-sensitive.
        if let Some(front) = entry.ctrl.front() {
            if front.encoded_len() <= budget {
                let f = entry.ctrl.pop_front().unwrap();
                let bytes = frame::encode(&f);
                let _ = entry.state.record_sent(bytes.len() as u64, now);
                entry.state.status = LinkStatus::Ready;
                if matches!(f, Frame::Ack { .. }) {
                    self.stats.acks_sent += 1;
                }
                return Some(bytes);
            }
            entry.state.status = LinkStatus::Busy;
            return None;
        }

        if entry.state.status == LinkStatus::Failed {
            return None;
        }

        if self.needs_schedule
            || (self.events_since_schedule > 0
                && !self.queue.is_empty()
                && !self.queue.has_assignment_for(link))
        {
            self.run_schedule(now);
        }

        let wire_len = {
            let pkt = self.queue.peek_for_link(link)?;
            1 + 4 + 8 + 8 + 2 + pkt.payload.len()
        };
        if wire_len > budget {
            self.links.get_mut(&link).unwrap().state.status = LinkStatus::Busy;
            return None;
        }
        let mut packet = self.queue.take_for_link(link).expect("peeked above");
        let queue_was_full = self.queue.len() + 1 >= self.queue.capacity();

        let seq = match packet.seq {
            Some(s) => s,
            None => match self.send.assign_seq() {
                Ok(s) => s,
                Err(_) => {
                    let _ = self.fail::<()>(ProtocolError::SeqExhausted);
                    return None;
                }
            },
        };
        packet.seq = Some(seq);
        packet.assigned_link = Some(link);

        let entry = self.links.get_mut(&link).unwrap();
        let rto = entry.state.rto_us(&self.cfg);
        let _ = entry.state.record_sent(wire_len as u64, now);
        entry.state.status = LinkStatus::Ready;

        let event = if packet.retransmit_count > 0 {
            TraceEventKind::Retransmit
        } else {
            TraceEventKind::Sent
        };
        self.trace(TraceRecord {
            t_us: now,
            link_id: link,
            event,
            seq,
            size: packet.payload.len() as u64,
            latency_us: None,
        });
        self.stats.data_frames_sent += 1;
        self.stats.payload_bytes_sent += packet.payload.len() as u64;
        self.events_since_schedule += 1;

        let bytes = frame::encode(&Frame::Data {
            channel: packet.channel,
            seq,
            sent_at_us: now,
            payload: packet.payload.clone(),
        });
        self.send.on_send(seq, packet, link, now, rto);

        if queue_was_full {
            self.unblock_channels_on_queue_space();
        }
        Some(bytes)
    }

    fn unblock_channels_on_queue_space(&mut self) {
        if self.queue.len() >= self.queue.capacity() {
            return;
        }
        let ids: Vec<ChannelId> = self
            .channels
            .iter()
            .filter(|(_, c)| c.blocked && c.win.send_window() > 0)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.channels.get_mut(&id).unwrap().blocked = false;
            self.out_events
                .push_back(EngineEvent::ChannelWritable { channel: id });
        }
    }

    fn run_schedule(&mut self, now: Micros) {
        self.needs_schedule = false;
        self.events_since_schedule = 0;
        if self.queue.is_empty() {
            return;
        }
        let mut states: Vec<LinkState> =
            self.links.values().map(|e| e.state.clone()).collect();
        // Last-resort probing: if every link timed out but transports are
        // still up, revive the most promising one instead of stalling. A
        // dead link fails again after one RTO; a healthy one recovers here.
        if !states.iter().any(|l| l.usable()) {
            let candidate = self
                .links
                .values()
                .filter(|e| e.transport_up && e.state.char.bandwidth > 0)
                .map(|e| {
                    (
                        e.state.consecutive_timeouts,
                        e.state.char.latency_us,
                        e.state.link_id,
                    )
                })
                .min();
            if let Some((_, _, id)) = candidate {
                let entry = self.links.get_mut(&id).unwrap();
                entry.state.status = LinkStatus::Ready;
                states = self.links.values().map(|e| e.state.clone()).collect();
            }
        }
        let result = match self.scheduler_kind {
            SchedulerKind::Edpf => schedule_heap(&self.queue, &states, now),
            SchedulerKind::Dumb => {
                let r = schedule_round_robin(&self.queue, &states, self.rr_offset);
                if let Ok(a) = &r {
                    self.rr_offset = self.rr_offset.wrapping_add(a.len());
                }
                r
            }
        };
        if let Ok(assignment) = result {
            self.queue.apply_assignment(&assignment);
            self.stats.scheduling_passes += 1;
            self.sched_snapshot = self
                .links
                .values()
                .map(|e| (e.state.link_id, e.state.char))
                .collect();
        }
        // A stalled queue stays as-is; link recovery re-triggers the pass.
    }

    fn note_estimate_drift(&mut self, link: LinkId) {
        let Some(entry) = self.links.get(&link) else {
            return;
        };
        let Some(old) = self.sched_snapshot.get(&link) else {
            self.needs_schedule = true;
            return;
        };
        let drift = |new: u64, old: u64| {
            let old = old.max(1) as f64;
            ((new as f64 - old) / old).abs() > self.cfg.reschedule_threshold
        };
        if drift(entry.state.char.latency_us, old.latency_us)
            || drift(entry.state.char.bandwidth, old.bandwidth)
        {
            self.needs_schedule = true;
        }
    }

    // ------------------------------------------------------------------
    // Control-frame plumbing
    // ------------------------------------------------------------------

    fn link_usable_for_ctrl(&self, link: LinkId) -> bool {
        self.links
            .get(&link)
            .map(|e| e.transport_up && e.state.status != LinkStatus::Failed)
            .unwrap_or(false)
    }

    /// Queues a control frame on the lowest-latency usable link, or parks it
    /// until any link comes up. Returns the chosen link.
    fn queue_ctrl(&mut self, frame: Frame) -> Option<LinkId> {
        let best = self
            .links
            .values()
            .filter(|e| e.transport_up && e.state.status != LinkStatus::Failed)
            .map(|e| (e.state.char.latency_us, e.state.link_id))
            .min();
        let best = best.or_else(|| {
            // Fall back to any live transport even if it is under timeout
            // suspicion; a parked frame helps nobody when transports are up.
            self.links
                .values()
                .filter(|e| e.transport_up)
                .map(|e| (e.state.char.latency_us, e.state.link_id))
                .min()
        });
        match best {
            Some((_, id)) => {
                self.links.get_mut(&id).unwrap().ctrl.push_back(frame);
                Some(id)
            }
            None => {
                self.pending_ctrl.push_back(frame);
                None
            }
        }
    }

    fn flush_ack(&mut self, now: Micros) {
        if let Some(info) = self.recv.maybe_emit_ack(
            now,
            self.cfg.ack_interval_us,
            self.cfg.ack_bytes_threshold,
        ) {
            self.queue_ctrl(Frame::Ack {
                cum_seq: info.cum,
                echo_ts_us: info.echo_ts_us,
                hold_delay_us: info.hold_delay_us,
            });
        }
    }

    fn window_budget_allows(&self) -> bool {
        let committed: u64 = self
            .channels
            .values()
            .filter(|c| !c.is_terminal())
            .map(|c| c.win.initial_window())
            .sum();
        committed + self.cfg.initial_window <= self.reorder.capacity_bytes()
    }

    fn fail<T>(&mut self, err: ProtocolError) -> Result<T, ProtocolError> {
        log::error!("bundle protocol failure: {err}");
        self.fatal = Some(err.clone());
        Err(err)
    }

    fn trace(&mut self, rec: TraceRecord) {
        if self.cfg.emit_trace {
            self.out_events.push_back(EngineEvent::Trace(rec));
        }
    }
}
