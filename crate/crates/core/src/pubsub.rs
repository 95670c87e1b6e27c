//! Best-effort topic publish/subscribe over UDP with KEEP_LAST history.
//!
//! Peers are configured statically (one address per topic); there is no
//! discovery and no acknowledgement traffic. A subscriber runs two threads:
//! a receive thread that decodes and reassembles frames into a bounded
//! history queue, and a callback thread that drains the queue. When the
//! queue is full the oldest entry is overwritten, so drops happen at the
//! reader.

use std::collections::VecDeque;
use std::fmt;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, UdpSocket};
use std::ops::Deref;
use std::os::fd::AsRawFd;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::clock::{Clock, MonotonicClock};
use crate::rtconfig::{self, ThreadSched};
use crate::wire::{self, Encoder, Message, Reassembler, ReassemblyConfig, WireError};

pub const DEFAULT_RCVBUF: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum PubSubError {
    #[error("invalid endpoint {0:?}: {1}")]
    InvalidEndpoint(String, &'static str),
    #[error("unsupported QoS: {0}")]
    UnsupportedQos(&'static str),
    #[error("message topic {got} does not match publisher topic {expected}")]
    TopicMismatch { expected: u16, got: u16 },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("transport error: {0}")]
    Transport(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    BestEffort,
    Reliable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum History {
    KeepLast,
    KeepAll,
}

/// Reliability and history settings. Only best-effort KEEP_LAST is
/// representable; anything else is rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QosSpec", into = "QosSpec")]
pub struct QosProfile {
    depth: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QosSpec {
    #[serde(default = "best_effort")]
    reliability: Reliability,
    #[serde(default = "keep_last")]
    history: History,
    #[serde(default = "one")]
    depth: usize,
}

fn best_effort() -> Reliability {
    Reliability::BestEffort
}
fn keep_last() -> History {
    History::KeepLast
}
fn one() -> usize {
    1
}

impl TryFrom<QosSpec> for QosProfile {
    type Error = PubSubError;
    fn try_from(s: QosSpec) -> Result<Self, Self::Error> {
        QosProfile::new(s.reliability, s.history, s.depth)
    }
}

impl From<QosProfile> for QosSpec {
    fn from(q: QosProfile) -> Self {
        QosSpec { reliability: q.reliability(), history: q.history(), depth: q.depth }
    }
}

impl Default for QosProfile {
    fn default() -> Self {
        Self { depth: 1 }
    }
}

impl QosProfile {
    pub fn new(reliability: Reliability, history: History, depth: usize) -> Result<Self, PubSubError> {
        if reliability != Reliability::BestEffort {
            return Err(PubSubError::UnsupportedQos("only best-effort reliability is supported"));
        }
        if history != History::KeepLast {
            return Err(PubSubError::UnsupportedQos("only KEEP_LAST history is supported"));
        }
        Self::keep_last(depth)
    }

    pub fn keep_last(depth: usize) -> Result<Self, PubSubError> {
        if depth == 0 {
            return Err(PubSubError::UnsupportedQos("history depth must be at least 1"));
        }
        Ok(Self { depth })
    }

    pub fn reliability(&self) -> Reliability {
        Reliability::BestEffort
    }

    pub fn history(&self) -> History {
        History::KeepLast
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

/// A UDP address, written `dotted-quad:port`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Endpoint {
    addr: IpAddr,
    port: u16,
}

impl Endpoint {
    pub fn new(addr: IpAddr, port: u16) -> Result<Self, PubSubError> {
        if port == 0 {
            return Err(PubSubError::InvalidEndpoint(format!("{addr}:{port}"), "port must be in 1..=65535"));
        }
        Ok(Self { addr, port })
    }

    pub fn localhost(port: u16) -> Result<Self, PubSubError> {
        Self::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port)
    }

    pub fn addr(&self) -> IpAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.addr, self.port)
    }

    /// Same port on the unspecified address of the same family.
    pub fn any_interface(&self) -> Endpoint {
        let addr = match self.addr {
            IpAddr::V4(_) => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            IpAddr::V6(_) => IpAddr::V6(Ipv6Addr::UNSPECIFIED),
        };
        Endpoint { addr, port: self.port }
    }

    pub fn with_addr(&self, addr: IpAddr) -> Endpoint {
        Endpoint { addr, port: self.port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.socket_addr())
    }
}

impl FromStr for Endpoint {
    type Err = PubSubError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let sa: SocketAddr =
            s.trim().parse().map_err(|_| PubSubError::InvalidEndpoint(s.to_string(), "expected address:port"))?;
        Endpoint::new(sa.ip(), sa.port())
            .map_err(|_| PubSubError::InvalidEndpoint(s.to_string(), "port must be in 1..=65535"))
    }
}

impl TryFrom<String> for Endpoint {
    type Error = PubSubError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> Self {
        e.to_string()
    }
}

static OPEN_SOCKETS: AtomicUsize = AtomicUsize::new(0);

/// Number of benchmark-owned UDP sockets currently open in this process.
pub fn open_socket_count() -> usize {
    OPEN_SOCKETS.load(Ordering::SeqCst)
}

/// A UDP socket counted in [`open_socket_count`] while alive.
#[derive(Debug)]
pub struct TrackedSocket(UdpSocket);

impl TrackedSocket {
    pub fn bind(addr: SocketAddr) -> io::Result<Self> {
        let s = UdpSocket::bind(addr)?;
        OPEN_SOCKETS.fetch_add(1, Ordering::SeqCst);
        Ok(Self(s))
    }

    /// Ephemeral socket of the right family for talking to `remote`.
    pub fn for_remote(remote: SocketAddr) -> io::Result<Self> {
        let local = match remote {
            SocketAddr::V4(_) => SocketAddr::new(IpAddr::V4(Ipv4Addr::UNSPECIFIED), 0),
            SocketAddr::V6(_) => SocketAddr::new(IpAddr::V6(Ipv6Addr::UNSPECIFIED), 0),
        };
        Self::bind(local)
    }

    pub fn set_buffer_sizes(&self, rcvbuf: Option<usize>, sndbuf: Option<usize>) -> io::Result<()> {
        let set = |opt: libc::c_int, val: usize| -> io::Result<()> {
            let v = val.min(i32::MAX as usize) as libc::c_int;
            // SAFETY: v outlives the call and the length matches its type.
            let rc = unsafe {
                libc::setsockopt(
                    self.0.as_raw_fd(),
                    libc::SOL_SOCKET,
                    opt,
                    &v as *const libc::c_int as *const libc::c_void,
                    std::mem::size_of::<libc::c_int>() as libc::socklen_t,
                )
            };
            if rc == 0 {
                Ok(())
            } else {
                Err(io::Error::last_os_error())
            }
        };
        if let Some(r) = rcvbuf {
            set(libc::SO_RCVBUF, r)?;
        }
        if let Some(s) = sndbuf {
            set(libc::SO_SNDBUF, s)?;
        }
        Ok(())
    }
}

impl Deref for TrackedSocket {
    type Target = UdpSocket;
    fn deref(&self) -> &UdpSocket {
        &self.0
    }
}

impl Drop for TrackedSocket {
    fn drop(&mut self) {
        OPEN_SOCKETS.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SendReport {
    pub datagrams: usize,
    pub bytes: usize,
    /// Datagrams the socket refused. The message is not retried.
    pub failed: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PublisherOptions {
    pub max_datagram: usize,
    /// Upper bound on a blocked socket write.
    pub write_timeout: Duration,
}

impl Default for PublisherOptions {
    fn default() -> Self {
        Self { max_datagram: wire::DEFAULT_MAX_DATAGRAM, write_timeout: Duration::from_millis(10) }
    }
}

#[derive(Debug)]
pub struct Publisher {
    topic_id: u16,
    remote: SocketAddr,
    socket: TrackedSocket,
    encoder: Encoder,
    failed_total: u64,
}

pub fn create_publisher(topic_id: u16, remote: Endpoint, qos: QosProfile) -> Result<Publisher, PubSubError> {
    Publisher::with_options(topic_id, remote, qos, PublisherOptions::default())
}

impl Publisher {
    pub fn with_options(
        topic_id: u16,
        remote: Endpoint,
        _qos: QosProfile,
        opts: PublisherOptions,
    ) -> Result<Self, PubSubError> {
        let encoder = Encoder::new(opts.max_datagram)?;
        let socket = TrackedSocket::for_remote(remote.socket_addr())?;
        socket.set_write_timeout(Some(opts.write_timeout))?;
        Ok(Self { topic_id, remote: remote.socket_addr(), socket, encoder, failed_total: 0 })
    }

    pub fn topic_id(&self) -> u16 {
        self.topic_id
    }

    pub fn failed_total(&self) -> u64 {
        self.failed_total
    }

    /// Writes every datagram of `msg` to the socket once, in fragment order.
    pub fn publish(&mut self, msg: &Message) -> Result<SendReport, PubSubError> {
        if msg.topic_id != self.topic_id {
            return Err(PubSubError::TopicMismatch { expected: self.topic_id, got: msg.topic_id });
        }
        let mut report = SendReport::default();
        let (socket, remote) = (&self.socket, self.remote);
        self.encoder.encode_with(msg, |d| {
            report.datagrams += 1;
            match socket.send_to(d, remote) {
                Ok(n) => report.bytes += n,
                Err(_) => report.failed += 1,
            }
        })?;
        self.failed_total += report.failed as u64;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pop {
    Message,
    Timeout,
    Closed,
}

#[derive(Debug)]
struct QueueState {
    items: VecDeque<Message>,
    spare: Vec<Message>,
    overwritten: u64,
    pushed: u64,
    closed: bool,
}

/// KEEP_LAST queue shared by one producer and one consumer. Message buffers
/// are recycled, so steady-state pushes and pops do not allocate.
#[derive(Debug)]
pub struct HistoryQueue {
    depth: usize,
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl HistoryQueue {
    pub fn new(depth: usize, payload_capacity: usize) -> Self {
        let depth = depth.max(1);
        let spare = (0..depth + 1).map(|_| Message::with_capacity(0, payload_capacity)).collect::<Vec<_>>();
        let mut spare_vec = Vec::with_capacity(depth + 2);
        spare_vec.extend(spare);
        Self {
            depth,
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(depth + 1),
                spare: spare_vec,
                overwritten: 0,
                pushed: 0,
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Copies `msg` in, overwriting the oldest entry when full.
    pub fn push(&self, msg: &Message) {
        let mut st = self.state.lock().expect("history queue poisoned");
        if st.items.len() == self.depth {
            let old = st.items.pop_front().expect("full queue");
            st.spare.push(old);
            st.overwritten += 1;
        }
        let mut slot = st.spare.pop().unwrap_or_default();
        slot.copy_from(msg);
        st.items.push_back(slot);
        st.pushed += 1;
        drop(st);
        self.ready.notify_one();
    }

    /// Moves the oldest entry into `out`, waiting up to `timeout`.
    pub fn pop_into(&self, out: &mut Message, timeout: Duration) -> Pop {
        let mut st = self.state.lock().expect("history queue poisoned");
        loop {
            if let Some(mut front) = st.items.pop_front() {
                std::mem::swap(out, &mut front);
                st.spare.push(front);
                return Pop::Message;
            }
            if st.closed {
                return Pop::Closed;
            }
            let (g, res) = self.ready.wait_timeout(st, timeout).expect("history queue poisoned");
            st = g;
            if res.timed_out() && st.items.is_empty() {
                return if st.closed { Pop::Closed } else { Pop::Timeout };
            }
        }
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("history queue poisoned").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overwritten(&self) -> u64 {
        self.state.lock().expect("history queue poisoned").overwritten
    }

    pub fn pushed(&self) -> u64 {
        self.state.lock().expect("history queue poisoned").pushed
    }

    pub fn close(&self) {
        self.state.lock().expect("history queue poisoned").closed = true;
        self.ready.notify_all();
    }
}

#[derive(Debug, Clone)]
pub struct SubscriberOptions {
    pub rcvbuf: usize,
    pub reassembly: ReassemblyConfig,
    /// How often the receive thread checks for shutdown.
    pub poll_interval: Duration,
    pub receive_sched: Option<ThreadSched>,
    pub callback_sched: Option<ThreadSched>,
    pub payload_capacity: usize,
}

impl Default for SubscriberOptions {
    fn default() -> Self {
        Self {
            rcvbuf: DEFAULT_RCVBUF,
            reassembly: ReassemblyConfig::default(),
            poll_interval: Duration::from_millis(20),
            receive_sched: None,
            callback_sched: None,
            payload_capacity: wire::MAX_PAYLOAD,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    datagrams: AtomicU64,
    malformed: AtomicU64,
    foreign_topic: AtomicU64,
    incomplete: AtomicU64,
    duplicates: AtomicU64,
    delivered: AtomicU64,
    receive_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriberStats {
    pub datagrams: u64,
    pub malformed: u64,
    pub foreign_topic: u64,
    pub completed: u64,
    pub incomplete: u64,
    pub duplicates: u64,
    pub overwritten: u64,
    pub delivered: u64,
    pub receive_errors: u64,
}

#[derive(Debug)]
pub struct Subscriber {
    topic_id: u16,
    local: SocketAddr,
    stop: Arc<AtomicBool>,
    queue: Arc<HistoryQueue>,
    counters: Arc<Counters>,
    receive: Option<JoinHandle<()>>,
    callback: Option<JoinHandle<()>>,
}

pub fn create_subscriber<F>(
    topic_id: u16,
    local: Endpoint,
    qos: QosProfile,
    callback: F,
) -> Result<Subscriber, PubSubError>
where
    F: FnMut(&Message) + Send + 'static,
{
    Subscriber::with_options(topic_id, local, qos, SubscriberOptions::default(), callback)
}

impl Subscriber {
    pub fn with_options<F>(
        topic_id: u16,
        local: Endpoint,
        qos: QosProfile,
        opts: SubscriberOptions,
        mut callback: F,
    ) -> Result<Self, PubSubError>
    where
        F: FnMut(&Message) + Send + 'static,
    {
        let socket = TrackedSocket::bind(local.socket_addr())?;
        if let Err(e) = socket.set_buffer_sizes(Some(opts.rcvbuf), None) {
            log::warn!("SO_RCVBUF {}: {e}", opts.rcvbuf);
        }
        socket.set_read_timeout(Some(opts.poll_interval))?;
        let local_addr = socket.local_addr()?;

        let stop = Arc::new(AtomicBool::new(false));
        let queue = Arc::new(HistoryQueue::new(qos.depth(), opts.payload_capacity));
        let counters = Arc::new(Counters::default());

        let receive = {
            let (stop, queue, counters) = (Arc::clone(&stop), Arc::clone(&queue), Arc::clone(&counters));
            let opts = opts.clone();
            thread::Builder::new().name(format!("rtt-recv-{topic_id}")).spawn(move || {
                if let Some(s) = opts.receive_sched {
                    rtconfig::apply_current_thread(s);
                }
                receive_loop(topic_id, socket, &opts, &stop, &queue, &counters);
                queue.close();
            })?
        };

        let callback_thread = {
            let (queue, counters) = (Arc::clone(&queue), Arc::clone(&counters));
            let (poll, sched, cap) = (opts.poll_interval, opts.callback_sched, opts.payload_capacity);
            let spawned = thread::Builder::new().name(format!("rtt-cb-{topic_id}")).spawn(move || {
                if let Some(s) = sched {
                    rtconfig::apply_current_thread(s);
                }
                let mut msg = Message::with_capacity(topic_id, cap);
                loop {
                    match queue.pop_into(&mut msg, poll) {
                        Pop::Message => {
                            counters.delivered.fetch_add(1, Ordering::Relaxed);
                            callback(&msg);
                        }
                        Pop::Timeout => {}
                        Pop::Closed => break,
                    }
                }
            });
            match spawned {
                Ok(h) => h,
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    let _ = receive.join();
                    return Err(e.into());
                }
            }
        };

        Ok(Self {
            topic_id,
            local: local_addr,
            stop,
            queue,
            counters,
            receive: Some(receive),
            callback: Some(callback_thread),
        })
    }

    pub fn topic_id(&self) -> u16 {
        self.topic_id
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn stats(&self) -> SubscriberStats {
        let c = &self.counters;
        SubscriberStats {
            datagrams: c.datagrams.load(Ordering::Relaxed),
            malformed: c.malformed.load(Ordering::Relaxed),
            foreign_topic: c.foreign_topic.load(Ordering::Relaxed),
            completed: self.queue.pushed(),
            incomplete: c.incomplete.load(Ordering::Relaxed),
            duplicates: c.duplicates.load(Ordering::Relaxed),
            overwritten: self.queue.overwritten(),
            delivered: c.delivered.load(Ordering::Relaxed),
            receive_errors: c.receive_errors.load(Ordering::Relaxed),
        }
    }

    /// Stops both threads and closes the socket.
    pub fn shutdown(mut self) -> SubscriberStats {
        self.stop_threads();
        self.stats()
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.receive.take() {
            let _ = h.join();
        }
        self.queue.close();
        if let Some(h) = self.callback.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn receive_loop(
    topic_id: u16,
    socket: TrackedSocket,
    opts: &SubscriberOptions,
    stop: &AtomicBool,
    queue: &HistoryQueue,
    counters: &Counters,
) {
    let clock = MonotonicClock;
    let mut buf = vec![0u8; 65_536];
    let mut reassembler = Reassembler::new(opts.reassembly);
    while !stop.load(Ordering::Relaxed) {
        let n = match socket.recv(&mut buf) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                reassembler.expire(clock.now_ns());
                sync_reassembly(&reassembler, counters);
                continue;
            }
            Err(_) => {
                counters.receive_errors.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        counters.datagrams.fetch_add(1, Ordering::Relaxed);
        let frame = match wire::decode(&buf[..n]) {
            Ok(f) => f,
            Err(_) => {
                counters.malformed.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        if frame.topic_id != topic_id {
            counters.foreign_topic.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        if let Some(msg) = reassembler.push(&frame, clock.now_ns()) {
            queue.push(msg);
        }
        sync_reassembly(&reassembler, counters);
    }
}

fn sync_reassembly(r: &Reassembler, counters: &Counters) {
    let c = r.counters();
    counters.incomplete.store(c.incomplete, Ordering::Relaxed);
    counters.duplicates.store(c.duplicates + c.stale, Ordering::Relaxed);
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::time::Instant;

    fn free_port() -> u16 {
        UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
    }

    #[test]
    fn qos_rejects_reliable_and_keep_all() {
        assert!(matches!(
            QosProfile::new(Reliability::Reliable, History::KeepLast, 1),
            Err(PubSubError::UnsupportedQos(_))
        ));
        assert!(QosProfile::new(Reliability::BestEffort, History::KeepAll, 1).is_err());
        assert!(QosProfile::keep_last(0).is_err());
        let q = QosProfile::new(Reliability::BestEffort, History::KeepLast, 3).unwrap();
        assert_eq!(q.depth(), 3);
    }

    #[test]
    fn endpoint_parsing() {
        let e: Endpoint = "10.0.0.2:7400".parse().unwrap();
        assert_eq!(e.port(), 7400);
        assert_eq!(e.to_string(), "10.0.0.2:7400");
        assert!(matches!("10.0.0.2:0".parse::<Endpoint>(), Err(PubSubError::InvalidEndpoint(..))));
        assert!("10.0.0.2".parse::<Endpoint>().is_err());
        assert!(Endpoint::localhost(0).is_err());
    }

    /// Queue simulation oracle: after pushing `seqs` with no pops, the queue
    /// holds the last `depth` of them.
    fn keep_last_oracle(seqs: &[u64], depth: usize) -> Vec<u64> {
        let skip = seqs.len().saturating_sub(depth);
        seqs[skip..].to_vec()
    }

    fn drain(q: &HistoryQueue) -> Vec<u64> {
        let mut out = Vec::new();
        let mut m = Message::default();
        while q.pop_into(&mut m, Duration::from_millis(1)) == Pop::Message {
            out.push(m.seq);
        }
        out
    }

    #[test]
    fn depth_three_keeps_newest_three() {
        let q = HistoryQueue::new(3, 16);
        for s in 1..=4 {
            q.push(&Message::with_pattern(1, s, 8));
        }
        assert_eq!(drain(&q), keep_last_oracle(&[1, 2, 3, 4], 3));
        assert_eq!(drain(&q), vec![2_u64; 0]);
        assert_eq!(q.overwritten(), 1);
    }

    #[test]
    fn depth_one_newest_wins() {
        let q = HistoryQueue::new(1, 16);
        q.push(&Message::with_pattern(1, 1, 8));
        q.push(&Message::with_pattern(1, 2, 8));
        assert_eq!(drain(&q), vec![2]);
        assert_eq!(q.overwritten(), 1);
    }

    #[test]
    fn closed_queue_reports_closed() {
        let q = HistoryQueue::new(1, 16);
        q.close();
        let mut m = Message::default();
        assert_eq!(q.pop_into(&mut m, Duration::from_millis(1)), Pop::Closed);
    }

    #[test]
    fn publish_counts_datagrams() {
        let sink = UdpSocket::bind("127.0.0.1:0").unwrap();
        let port = sink.local_addr().unwrap().port();
        let mut p = create_publisher(1, Endpoint::localhost(port).unwrap(), QosProfile::default()).unwrap();
        assert_eq!(p.publish(&Message::with_pattern(1, 0, 500)).unwrap().datagrams, 1);
        assert_eq!(p.publish(&Message::with_pattern(1, 1, 32_768)).unwrap().datagrams, 24);
        assert_eq!(p.publish(&Message::with_pattern(1, 2, 0)).unwrap().datagrams, 1);
        assert!(matches!(p.publish(&Message::with_pattern(2, 3, 0)), Err(PubSubError::TopicMismatch { .. })));
    }

    #[test]
    fn loopback_delivery_and_malformed_counting() {
        let port = free_port();
        let (tx, rx) = mpsc::channel();
        let sub =
            create_subscriber(7, Endpoint::localhost(port).unwrap(), QosProfile::default(), move |m: &Message| {
                tx.send(m.clone()).unwrap();
            })
            .unwrap();
        let mut p = create_publisher(7, Endpoint::localhost(port).unwrap(), QosProfile::default()).unwrap();
        let m = Message::with_pattern(7, 0, 40_000);
        p.publish(&m).unwrap();
        let got = rx.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(got, m);

        let raw = UdpSocket::bind("127.0.0.1:0").unwrap();
        raw.send_to(b"garbage", ("127.0.0.1", port)).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while sub.stats().malformed == 0 && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        let stats = sub.shutdown();
        assert_eq!(stats.malformed, 1);
        assert_eq!(stats.delivered, 1);
    }
}
