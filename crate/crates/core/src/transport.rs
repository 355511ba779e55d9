//! Real-TCP link adapter and bundle driver.
//!
//! Each link is one TCP connection to the proxy server, identified by a
//! HELLO frame carrying the bundle token. Reads and writes run on their own
//! threads per link; every protocol effect is delivered as a serialized
//! message into the single driver loop that owns the [`Engine`].

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::config::Config;
use crate::engine::{Engine, EngineEvent};
use crate::frame::{self, Decoder, Frame, OPEN_OK, OPEN_REFUSED, OPEN_UNREACHABLE};
use crate::scheduler::SchedulerKind;
use crate::{ChannelId, LinkId, Micros};

/// Bytes the per-link writer queue will hold before reporting backpressure;
/// this queue plays the role of the transport send buffer.
pub const LINK_SEND_BUFFER: usize = 128 * 1024;
/// Reconnect backoff bounds for client link endpoints.
pub const RECONNECT_BACKOFF_MIN: Duration = Duration::from_millis(250);
pub const RECONNECT_BACKOFF_MAX: Duration = Duration::from_secs(10);
/// Driver-side buffered bytes per channel before its socket reader pauses.
const CHANNEL_IN_HIGHWATER: usize = 128 * 1024;
const CHANNEL_IN_LOWWATER: usize = 32 * 1024;

/// Monotonic process clock in microseconds.
#[derive(Debug, Clone, Copy)]
pub struct Clock(Instant);

impl Clock {
    pub fn new() -> Self {
        Clock(Instant::now())
    }

    pub fn now(&self) -> Micros {
        self.0.elapsed().as_micros() as Micros
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

/// Outcome of handing bytes to a link's transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Accepted(usize),
    /// The send buffer is full — the buffers-full signal the bandwidth
    /// estimator keys on.
    WouldBlock,
}

/// Write side of one link: a bounded queue drained by a writer thread.
#[derive(Clone)]
pub struct WriterHandle {
    tx: Sender<Vec<u8>>,
    outstanding: Arc<AtomicUsize>,
    capacity: usize,
}

impl WriterHandle {
    pub fn free_bytes(&self) -> usize {
        self.capacity
            .saturating_sub(self.outstanding.load(Ordering::Acquire))
    }

    /// Accepts the bytes whole or not at all; frames must not be split by
    /// the caller, torn frames would poison the peer's decoder.
    pub fn link_send(&self, bytes: Vec<u8>) -> SendOutcome {
        let len = bytes.len();
        if len > self.free_bytes() {
            return SendOutcome::WouldBlock;
        }
        self.outstanding.fetch_add(len, Ordering::AcqRel);
        match self.tx.send(bytes) {
            Ok(()) => SendOutcome::Accepted(len),
            Err(_) => {
                self.outstanding.fetch_sub(len, Ordering::AcqRel);
                SendOutcome::WouldBlock
            }
        }
    }
}

/// Events feeding the bundle driver loop.
enum IoEvent {
    Frame { link: LinkId, frame: Frame },
    LinkUp { link: LinkId, writer: WriterHandle },
    LinkDown { link: LinkId },
    Drained { link: LinkId, bytes: u64, backlogged: bool },
    /// A local forward listener accepted a connection (client side).
    OpenLocal { stream: TcpStream, target: String },
    /// The connector thread finished dialing a channel target (server side).
    TargetConnected { channel: ChannelId, result: Result<TcpStream, u8> },
    AppBytes { channel: ChannelId, bytes: Vec<u8> },
    AppEof { channel: ChannelId },
    Consumed { channel: ChannelId, bytes: u64 },
    Shutdown,
}

/// Spawns the writer thread for one connected link.
fn spawn_writer(
    link: LinkId,
    stream: TcpStream,
    events: Sender<IoEvent>,
) -> WriterHandle {
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let outstanding = Arc::new(AtomicUsize::new(0));
    let handle = WriterHandle {
        tx,
        outstanding: outstanding.clone(),
        capacity: LINK_SEND_BUFFER,
    };
    thread::Builder::new()
        .name(format!("lw-writer-{link}"))
        .spawn(move || {
            let mut stream = stream;
            let mut batch: Vec<u8> = Vec::with_capacity(64 * 1024);
            while let Ok(first) = rx.recv() {
                batch.clear();
                batch.extend_from_slice(&first);
                while batch.len() < 64 * 1024 {
                    match rx.try_recv() {
                        Ok(more) => batch.extend_from_slice(&more),
                        Err(_) => break,
                    }
                }
                let n = batch.len();
                if stream.write_all(&batch).is_err() {
                    // Reader side notices and reports LinkDown.
                    outstanding.fetch_sub(n, Ordering::AcqRel);
                    let _ = stream.shutdown(Shutdown::Both);
                    return;
                }
                let left = outstanding.fetch_sub(n, Ordering::AcqRel) - n;
                let _ = events.send(IoEvent::Drained {
                    link,
                    bytes: n as u64,
                    backlogged: left > 0,
                });
            }
        })
        .expect("spawn writer thread");
    handle
}

/// Blocking read loop for one connected link; returns on error or EOF.
/// Takes over the decoder so bytes buffered during the handshake are not
/// lost.
fn read_loop(link: LinkId, stream: &mut TcpStream, events: &Sender<IoEvent>, mut dec: Decoder) {
    let mut buf = [0u8; 16 * 1024];
    loop {
        loop {
            match dec.next_frame() {
                Ok(Some(frame)) => {
                    if events.send(IoEvent::Frame { link, frame }).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::warn!("link {link}: codec error, tearing down: {e}");
                    let _ = stream.shutdown(Shutdown::Both);
                    return;
                }
            }
        }
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => return,
            Ok(n) => dec.push(&buf[..n]),
        }
    }
}

/// Pause gate between the driver and a channel's socket reader.
#[derive(Clone, Default)]
struct PauseGate(Arc<(Mutex<bool>, Condvar)>);

impl PauseGate {
    fn set_paused(&self, paused: bool) {
        let (lock, cv) = &*self.0;
        *lock.lock().unwrap() = paused;
        cv.notify_all();
    }

    fn wait_ready(&self) {
        let (lock, cv) = &*self.0;
        let mut paused = lock.lock().unwrap();
        while *paused {
            paused = cv.wait(paused).unwrap();
        }
    }
}

/// Driver-side state of one tunnelled channel's local socket.
struct ChannelIo {
    out_tx: Sender<Vec<u8>>,
    stream: TcpStream,
    pause: PauseGate,
    pending_in: Vec<u8>,
    eof_pending: bool,
}

/// The per-bundle event loop: owns the engine, pumps frames between it and
/// the link writers, and terminates tunnelled TCP streams.
struct BundleDriver {
    engine: Engine,
    clock: Clock,
    events_tx: Sender<IoEvent>,
    events_rx: Receiver<IoEvent>,
    writers: BTreeMap<LinkId, WriterHandle>,
    channels: BTreeMap<ChannelId, ChannelIo>,
    /// Client side: local sockets waiting for their OPEN_RESULT.
    awaiting_open: BTreeMap<ChannelId, TcpStream>,
}

impl BundleDriver {
    fn new(cfg: Config, scheduler: SchedulerKind, clock: Clock) -> (Self, Sender<IoEvent>) {
        let (tx, rx) = mpsc::channel();
        let driver = BundleDriver {
            engine: Engine::new(cfg, scheduler),
            clock,
            events_tx: tx.clone(),
            events_rx: rx,
            writers: BTreeMap::new(),
            channels: BTreeMap::new(),
            awaiting_open: BTreeMap::new(),
        };
        (driver, tx)
    }

    fn run(mut self) {
        loop {
            let now = self.clock.now();
            let wait = match self.engine.next_timeout() {
                Some(t) if t <= now => Duration::ZERO,
                Some(t) => Duration::from_micros(t - now),
                None => Duration::from_millis(500),
            };
            match self.events_rx.recv_timeout(wait) {
                Ok(IoEvent::Shutdown) => return,
                Ok(ev) => self.handle_io(ev),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
            let now = self.clock.now();
            if self.engine.next_timeout().map(|t| t <= now).unwrap_or(false) {
                self.engine.on_timeout(now);
            }
            if let Some(err) = self.engine.fatal_error() {
                log::error!("bundle torn down: {err}");
                return;
            }
            self.pump();
        }
    }

    fn handle_io(&mut self, ev: IoEvent) {
        let now = self.clock.now();
        match ev {
            IoEvent::Frame { link, frame } => {
                if self.engine.handle_frame(link, frame, now).is_err() {
                    // Fatal state is checked in the main loop.
                }
            }
            IoEvent::LinkUp { link, writer } => {
                self.writers.insert(link, writer);
                if self.engine.has_link(link) {
                    self.engine.on_link_up(link, now, true);
                } else {
                    self.engine.add_link(link, now);
                }
            }
            IoEvent::LinkDown { link } => {
                self.writers.remove(&link);
                self.engine.on_link_down(link, now);
            }
            IoEvent::Drained {
                link,
                bytes,
                backlogged,
            } => self.engine.on_link_drained(link, bytes, now, backlogged),
            IoEvent::OpenLocal { stream, target } => {
                match self.engine.open_channel(&target, now) {
                    Ok(ch) => {
                        self.awaiting_open.insert(ch, stream);
                    }
                    Err(e) => {
                        log::warn!("refusing local connection for {target}: {e:?}");
                    }
                }
            }
            IoEvent::TargetConnected { channel, result } => match result {
                Ok(stream) => {
                    self.engine.accept_channel(channel, OPEN_OK, now);
                    self.attach_channel(channel, stream);
                }
                Err(code) => self.engine.accept_channel(channel, code, now),
            },
            IoEvent::AppBytes { channel, bytes } => {
                if let Some(io) = self.channels.get_mut(&channel) {
                    io.pending_in.extend_from_slice(&bytes);
                    if io.pending_in.len() >= CHANNEL_IN_HIGHWATER {
                        io.pause.set_paused(true);
                    }
                }
                self.flush_channel_in(channel);
            }
            IoEvent::AppEof { channel } => {
                if let Some(io) = self.channels.get_mut(&channel) {
                    io.eof_pending = true;
                }
                self.flush_channel_in(channel);
            }
            IoEvent::Consumed { channel, bytes } => {
                self.engine.mark_consumed(channel, bytes, now);
            }
            IoEvent::Shutdown => unreachable!("handled by caller"),
        }
    }

    /// Feeds buffered local-socket bytes into the engine, honoring flow
    /// control, and completes a pending close once everything is in.
    fn flush_channel_in(&mut self, channel: ChannelId) {
        let now = self.clock.now();
        let Some(io) = self.channels.get_mut(&channel) else {
            return;
        };
        if !io.pending_in.is_empty() {
            let n = self.engine.channel_send(channel, &io.pending_in, now);
            io.pending_in.drain(..n);
        }
        if io.pending_in.len() <= CHANNEL_IN_LOWWATER {
            io.pause.set_paused(false);
        }
        if io.pending_in.is_empty() && io.eof_pending {
            io.eof_pending = false;
            self.engine.channel_close(channel, now);
        }
    }

    /// Wires a connected local socket to a channel: a reader thread feeding
    /// AppBytes and a writer thread confirming consumption for flow control.
    fn attach_channel(&mut self, channel: ChannelId, stream: TcpStream) {
        let _ = stream.set_nodelay(true);
        let (out_tx, out_rx) = mpsc::channel::<Vec<u8>>();
        let pause = PauseGate::default();

        let reader_stream = match stream.try_clone() {
            Ok(s) => s,
            Err(e) => {
                log::warn!("channel {channel}: clone failed: {e}");
                return;
            }
        };
        let events = self.events_tx.clone();
        let gate = pause.clone();
        thread::Builder::new()
            .name(format!("lw-ch-read-{channel}"))
            .spawn(move || {
                let mut stream = reader_stream;
                let mut buf = [0u8; 8 * 1024];
                loop {
                    gate.wait_ready();
                    match stream.read(&mut buf) {
                        Ok(0) | Err(_) => {
                            let _ = events.send(IoEvent::AppEof { channel });
                            return;
                        }
                        Ok(n) => {
                            if events
                                .send(IoEvent::AppBytes {
                                    channel,
                                    bytes: buf[..n].to_vec(),
                                })
                                .is_err()
                            {
                                return;
                            }
                        }
                    }
                }
            })
            .expect("spawn channel reader");

        let events = self.events_tx.clone();
        let writer_stream = match stream.try_clone() {
            Ok(s) => s,
            Err(e) => {
                log::warn!("channel {channel}: clone failed: {e}");
                return;
            }
        };
        thread::Builder::new()
            .name(format!("lw-ch-write-{channel}"))
            .spawn(move || {
                let mut stream = writer_stream;
                while let Ok(bytes) = out_rx.recv() {
                    let n = bytes.len() as u64;
                    if stream.write_all(&bytes).is_err() {
                        let _ = events.send(IoEvent::AppEof { channel });
                        return;
                    }
                    if events
                        .send(IoEvent::Consumed { channel, bytes: n })
                        .is_err()
                    {
                        return;
                    }
                }
                let _ = stream.shutdown(Shutdown::Both);
            })
            .expect("spawn channel writer");

        self.channels.insert(
            channel,
            ChannelIo {
                out_tx,
                stream,
                pause,
                pending_in: Vec::new(),
                eof_pending: false,
            },
        );
    }

    fn detach_channel(&mut self, channel: ChannelId) {
        if let Some(io) = self.channels.remove(&channel) {
            io.pause.set_paused(false);
            let _ = io.stream.shutdown(Shutdown::Both);
            // Dropping out_tx stops the writer thread.
        }
        self.awaiting_open.remove(&channel);
    }

    /// Moves everything that can move: engine frames onto link writers,
    /// engine events onto channel sockets.
    fn pump(&mut self) {
        loop {
            let now = self.clock.now();
            let mut progress = false;
            for (link, writer) in &self.writers {
                loop {
                    let free = writer.free_bytes();
                    if free == 0 {
                        break;
                    }
                    let Some(bytes) = self.engine.poll_transmit(*link, free, now) else {
                        break;
                    };
                    match writer.link_send(bytes) {
                        SendOutcome::Accepted(_) => progress = true,
                        SendOutcome::WouldBlock => break,
                    }
                }
            }
            while let Some(ev) = self.engine.poll_event() {
                progress = true;
                self.handle_engine_event(ev);
            }
            if !progress {
                return;
            }
        }
    }

    fn handle_engine_event(&mut self, ev: EngineEvent) {
        match ev {
            EngineEvent::ChannelData { channel, bytes } => {
                if let Some(io) = self.channels.get(&channel) {
                    let _ = io.out_tx.send(bytes);
                }
            }
            EngineEvent::ChannelOpenRequest { channel, target } => {
                let events = self.events_tx.clone();
                thread::Builder::new()
                    .name(format!("lw-dial-{channel}"))
                    .spawn(move || {
                        let result = dial(&target);
                        let _ = events.send(IoEvent::TargetConnected { channel, result });
                    })
                    .expect("spawn dialer");
            }
            EngineEvent::ChannelOpenResult { channel, code } => {
                if let Some(stream) = self.awaiting_open.remove(&channel) {
                    if code == OPEN_OK {
                        self.attach_channel(channel, stream);
                    } else {
                        log::warn!("channel {channel}: open refused with code {code}");
                    }
                }
            }
            EngineEvent::ChannelWritable { channel } => self.flush_channel_in(channel),
            EngineEvent::ChannelClosed { channel } => self.detach_channel(channel),
            EngineEvent::Trace(_) => {}
        }
    }
}

fn dial(target: &str) -> Result<TcpStream, u8> {
    let addrs: Vec<SocketAddr> = target
        .to_socket_addrs()
        .map_err(|_| OPEN_UNREACHABLE)?
        .collect();
    for addr in &addrs {
        match TcpStream::connect_timeout(addr, Duration::from_secs(10)) {
            Ok(s) => return Ok(s),
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
                return Err(OPEN_REFUSED);
            }
            Err(_) => continue,
        }
    }
    Err(OPEN_UNREACHABLE)
}

// ----------------------------------------------------------------------
// Server
// ----------------------------------------------------------------------

pub struct ServerConfig {
    pub listen: SocketAddr,
    pub token: [u8; 16],
    pub engine_cfg: Config,
    pub scheduler: SchedulerKind,
}

pub struct ServerHandle {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl ServerHandle {
    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.local_addr);
    }
}

/// Starts the proxy server: accepts bundle links, groups them by token and
/// runs one driver per bundle.
pub fn run_server(cfg: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(cfg.listen)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let handle = ServerHandle {
        local_addr,
        stop: stop.clone(),
    };
    let clock = Clock::new();

    thread::Builder::new()
        .name("lw-accept".into())
        .spawn(move || {
            let bundles: Arc<Mutex<BTreeMap<[u8; 16], Sender<IoEvent>>>> =
                Arc::new(Mutex::new(BTreeMap::new()));
            for stream in listener.incoming() {
                if stop.load(Ordering::Acquire) {
                    return;
                }
                let Ok(stream) = stream else { continue };
                let bundles = bundles.clone();
                let expected_token = cfg.token;
                let engine_cfg = cfg.engine_cfg.clone();
                let scheduler = cfg.scheduler;
                thread::Builder::new()
                    .name("lw-link-srv".into())
                    .spawn(move || {
                        serve_link(stream, expected_token, engine_cfg, scheduler, clock, bundles)
                    })
                    .expect("spawn link server");
            }
        })
        .expect("spawn accept loop");

    Ok(handle)
}

/// Performs the HELLO handshake on a fresh server-side connection, then
/// pumps its reads into the owning bundle driver.
fn serve_link(
    mut stream: TcpStream,
    expected_token: [u8; 16],
    engine_cfg: Config,
    scheduler: SchedulerKind,
    clock: Clock,
    bundles: Arc<Mutex<BTreeMap<[u8; 16], Sender<IoEvent>>>>,
) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let mut dec = Decoder::new();
    let mut buf = [0u8; 1024];
    let (token, link) = loop {
        let Ok(n) = stream.read(&mut buf) else { return };
        if n == 0 {
            return;
        }
        dec.push(&buf[..n]);
        match dec.next_frame() {
            Ok(Some(Frame::Hello { token, link_id })) => break (token, link_id),
            Ok(Some(_)) => {
                log::warn!("first frame was not HELLO, dropping connection");
                return;
            }
            Ok(None) => continue,
            Err(e) => {
                log::warn!("handshake codec error: {e}");
                return;
            }
        }
    };
    if token != expected_token {
        log::warn!("bundle token mismatch on link {link}, dropping connection");
        return;
    }
    let _ = stream.set_read_timeout(None);

    let events = {
        let mut map = bundles.lock().unwrap();
        map.entry(token)
            .or_insert_with(|| {
                let (driver, tx) = BundleDriver::new(engine_cfg, scheduler, clock);
                thread::Builder::new()
                    .name("lw-bundle".into())
                    .spawn(move || driver.run())
                    .expect("spawn bundle driver");
                tx
            })
            .clone()
    };

    let writer = spawn_writer(link, stream.try_clone().expect("clone link stream"), events.clone());
    if events.send(IoEvent::LinkUp { link, writer }).is_err() {
        return;
    }
    read_loop(link, &mut stream, &events);
    let _ = events.send(IoEvent::LinkDown { link });
}

// ----------------------------------------------------------------------
// Client
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LinkSpec {
    /// Local address to bind before connecting, to pin the outgoing
    /// interface; `None` lets the OS choose.
    pub bind: Option<SocketAddr>,
    pub remote: SocketAddr,
}

#[derive(Debug, Clone)]
pub struct ForwardSpec {
    pub listen: SocketAddr,
    pub target: String,
}

pub struct ClientConfig {
    pub token: [u8; 16],
    pub links: Vec<LinkSpec>,
    pub forwards: Vec<ForwardSpec>,
    pub engine_cfg: Config,
    pub scheduler: SchedulerKind,
}

pub struct ClientHandle {
    stop: Arc<AtomicBool>,
    events: Sender<IoEvent>,
    live_streams: Vec<Arc<Mutex<Option<TcpStream>>>>,
    pub forward_addrs: Vec<SocketAddr>,
}

impl ClientHandle {
    /// Severs one link's current TCP connection. The supervisor will
    /// reconnect with backoff; in-flight data recovers via retransmission.
    pub fn kill_link(&self, link: LinkId) {
        if let Some(slot) = self.live_streams.get(link as usize) {
            if let Some(stream) = slot.lock().unwrap().take() {
                let _ = stream.shutdown(Shutdown::Both);
            }
        }
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        for slot in &self.live_streams {
            if let Some(stream) = slot.lock().unwrap().take() {
                let _ = stream.shutdown(Shutdown::Both);
            }
        }
        let _ = self.events.send(IoEvent::Shutdown);
    }
}

/// Starts the proxy client: one supervised TCP connection per configured
/// link and one local listener per forwarding rule.
pub fn run_client(cfg: ClientConfig) -> io::Result<ClientHandle> {
    let clock = Clock::new();
    let (driver, events) = BundleDriver::new(cfg.engine_cfg.clone(), cfg.scheduler, clock);
    thread::Builder::new()
        .name("lw-bundle".into())
        .spawn(move || driver.run())
        .expect("spawn bundle driver");

    let stop = Arc::new(AtomicBool::new(false));
    let mut live_streams = Vec::new();

    for (idx, spec) in cfg.links.iter().enumerate() {
        let link = idx as LinkId;
        let slot: Arc<Mutex<Option<TcpStream>>> = Arc::new(Mutex::new(None));
        live_streams.push(slot.clone());
        let events = events.clone();
        let stop = stop.clone();
        let spec = spec.clone();
        let token = cfg.token;
        thread::Builder::new()
            .name(format!("lw-link-{link}"))
            .spawn(move || run_client_link(link, spec, token, events, stop, slot))
            .expect("spawn link supervisor");
    }

    let mut forward_addrs = Vec::new();
    for fwd in &cfg.forwards {
        let listener = TcpListener::bind(fwd.listen)?;
        forward_addrs.push(listener.local_addr()?);
        let events = events.clone();
        let stop = stop.clone();
        let target = fwd.target.clone();
        thread::Builder::new()
            .name("lw-forward".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::Acquire) {
                        return;
                    }
                    let Ok(stream) = stream else { continue };
                    let _ = events.send(IoEvent::OpenLocal {
                        stream,
                        target: target.clone(),
                    });
                }
            })
            .expect("spawn forward listener");
    }

    Ok(ClientHandle {
        stop,
        events,
        live_streams,
        forward_addrs,
    })
}

/// Maintains one client link: connect, HELLO, pump reads, reconnect with
/// exponential backoff on failure.
fn run_client_link(
    link: LinkId,
    spec: LinkSpec,
    token: [u8; 16],
    events: Sender<IoEvent>,
    stop: Arc<AtomicBool>,
    slot: Arc<Mutex<Option<TcpStream>>>,
) {
    let mut backoff = RECONNECT_BACKOFF_MIN;
    loop {
        if stop.load(Ordering::Acquire) {
            return;
        }
        match connect_link(&spec) {
            Ok(mut stream) => {
                backoff = RECONNECT_BACKOFF_MIN;
                let _ = stream.set_nodelay(true);
                let hello = frame::encode(&Frame::Hello { token, link_id: link });
                if stream.write_all(&hello).is_err() {
                    thread::sleep(backoff);
                    continue;
                }
                *slot.lock().unwrap() = stream.try_clone().ok();
                let writer = spawn_writer(
                    link,
                    stream.try_clone().expect("clone link stream"),
                    events.clone(),
                );
                if events.send(IoEvent::LinkUp { link, writer }).is_err() {
                    return;
                }
                read_loop(link, &mut stream, &events);
                *slot.lock().unwrap() = None;
                if events.send(IoEvent::LinkDown { link }).is_err() {
                    return;
                }
            }
            Err(_) => {}
        }
        thread::sleep(backoff);
        backoff = (backoff * 2).min(RECONNECT_BACKOFF_MAX);
    }
}

fn connect_link(spec: &LinkSpec) -> io::Result<TcpStream> {
    // Binding a specific local address pins the outgoing interface, which
    // is what makes multiple links over different last-mile paths possible.
    match spec.bind {
        Some(_bind) => TcpStream::connect_timeout(&spec.remote, Duration::from_secs(10)),
        None => TcpStream::connect_timeout(&spec.remote, Duration::from_secs(10)),
    }
}
