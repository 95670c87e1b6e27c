//! Host stress workers and constant-bit-rate UDP traffic.
//!
//! Workers are threads in this process pinned to normal scheduling, so RT
//! threads always preempt them.

use std::fs::File;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::clock::{Clock, MonotonicClock};
use crate::pubsub::{Endpoint, TrackedSocket};
use crate::rtconfig::{self, ThreadSched};

pub const MIN_PACKET: usize = 64;
pub const MAX_PACKET: usize = 1400;
pub const DEFAULT_PACKET: usize = 1250;
/// Bytes of sequence number at the front of every traffic datagram.
pub const SEQ_HEADER: usize = 8;

static LIVE_STRESS: AtomicUsize = AtomicUsize::new(0);
static LIVE_TRAFFIC: AtomicUsize = AtomicUsize::new(0);

/// Stress worker threads currently alive in this process.
pub fn live_stress_workers() -> usize {
    LIVE_STRESS.load(Ordering::SeqCst)
}

/// Traffic sender and sink threads currently alive in this process.
pub fn live_traffic_threads() -> usize {
    LIVE_TRAFFIC.load(Ordering::SeqCst)
}

/// Decrements its counter when the owning thread ends (or never starts).
struct LiveGuard(&'static AtomicUsize);

impl LiveGuard {
    fn new(counter: &'static AtomicUsize) -> Self {
        counter.fetch_add(1, Ordering::SeqCst);
        Self(counter)
    }
}

impl Drop for LiveGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("stress spec has no workers")]
    EmptyStress,
    #[error("traffic rate must be positive")]
    ZeroRate,
    #[error("packet size {0} outside {MIN_PACKET}..={MAX_PACKET}")]
    PacketSize(usize),
    #[error("spawned {started} of {requested} workers before failing: {source}")]
    PartialStart { started: usize, requested: usize, source: io::Error },
    #[error("traffic socket: {0}")]
    Transport(#[from] io::Error),
}

fn default_vm_bytes() -> usize {
    32 << 20
}
fn default_hdd_bytes() -> usize {
    16 << 20
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressSpec {
    #[serde(default)]
    pub cpu_workers: usize,
    #[serde(default)]
    pub vm_workers: usize,
    #[serde(default)]
    pub io_workers: usize,
    #[serde(default)]
    pub hdd_workers: usize,
    /// Allocated, touched and freed by each vm worker per iteration.
    #[serde(default = "default_vm_bytes")]
    pub vm_bytes: usize,
    /// Written then removed by each hdd worker per iteration.
    #[serde(default = "default_hdd_bytes")]
    pub hdd_bytes: usize,
}

impl StressSpec {
    pub fn uniform(n: usize) -> Self {
        Self {
            cpu_workers: n,
            vm_workers: n,
            io_workers: n,
            hdd_workers: n,
            vm_bytes: default_vm_bytes(),
            hdd_bytes: default_hdd_bytes(),
        }
    }

    pub fn worker_count(&self) -> usize {
        self.cpu_workers + self.vm_workers + self.io_workers + self.hdd_workers
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        if self.worker_count() == 0 {
            return Err(LoadError::EmptyStress);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WorkerKind {
    Cpu,
    Vm,
    Io,
    Hdd,
}

impl WorkerKind {
    fn name(self) -> &'static str {
        match self {
            WorkerKind::Cpu => "cpu",
            WorkerKind::Vm => "vm",
            WorkerKind::Io => "io",
            WorkerKind::Hdd => "hdd",
        }
    }
}

/// Iterations completed per worker type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressReport {
    pub workers: usize,
    pub cpu_rounds: u64,
    pub vm_rounds: u64,
    pub vm_alloc_failures: u64,
    pub io_syncs: u64,
    pub hdd_files: u64,
    pub hdd_errors: u64,
}

#[derive(Debug, Default)]
struct WorkerTally {
    rounds: u64,
    failures: u64,
}

fn cpu_worker(stop: &AtomicBool) -> WorkerTally {
    let mut t = WorkerTally::default();
    let mut x = 0.5f64;
    while !stop.load(Ordering::Relaxed) {
        for _ in 0..10_000 {
            x = (x * 1.000_001 + 0.3).sqrt();
        }
        std::hint::black_box(x);
        t.rounds += 1;
    }
    t
}

fn vm_worker(stop: &AtomicBool, bytes: usize) -> WorkerTally {
    let mut t = WorkerTally::default();
    while !stop.load(Ordering::Relaxed) {
        let mut buf: Vec<u8> = Vec::new();
        // The process may hold locked memory; a failed reservation is
        // counted rather than aborting.
        if buf.try_reserve_exact(bytes).is_err() {
            t.failures += 1;
            thread::sleep(Duration::from_millis(10));
            continue;
        }
        buf.resize(bytes, 0);
        for i in (0..bytes).step_by(4096) {
            buf[i] = buf[i].wrapping_add(1);
            if i % (1 << 20) == 0 && stop.load(Ordering::Relaxed) {
                break;
            }
        }
        std::hint::black_box(&buf);
        t.rounds += 1;
    }
    t
}

fn io_worker(stop: &AtomicBool) -> WorkerTally {
    let mut t = WorkerTally::default();
    while !stop.load(Ordering::Relaxed) {
        // SAFETY: sync(2) takes no arguments and cannot fail.
        unsafe { libc::sync() };
        t.rounds += 1;
    }
    t
}

fn hdd_worker(stop: &AtomicBool, bytes: usize) -> WorkerTally {
    const CHUNK: usize = 1 << 20;
    let mut t = WorkerTally::default();
    let block = vec![0x5au8; CHUNK.min(bytes.max(1))];
    while !stop.load(Ordering::Relaxed) {
        let res = (|| -> io::Result<()> {
            let mut f: File = tempfile::tempfile()?;
            let mut left = bytes;
            while left > 0 && !stop.load(Ordering::Relaxed) {
                let n = left.min(block.len());
                f.write_all(&block[..n])?;
                left -= n;
            }
            f.sync_data()
        })();
        match res {
            Ok(()) => t.rounds += 1,
            Err(_) => {
                t.failures += 1;
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
    t
}

/// Running stress workers. Stops them on drop.
#[derive(Debug)]
pub struct StressHandle {
    stop: Arc<AtomicBool>,
    workers: Vec<(WorkerKind, JoinHandle<WorkerTally>)>,
    report: StressReport,
}

pub fn start_stress(spec: &StressSpec) -> Result<StressHandle, LoadError> {
    start_stress_limited(spec, usize::MAX)
}

/// Spawns at most `limit` workers and fails as if the OS refused the rest.
fn start_stress_limited(spec: &StressSpec, limit: usize) -> Result<StressHandle, LoadError> {
    spec.validate()?;
    let stop = Arc::new(AtomicBool::new(false));
    let mut handle = StressHandle { stop: Arc::clone(&stop), workers: Vec::new(), report: StressReport::default() };
    let kinds = [
        (WorkerKind::Cpu, spec.cpu_workers),
        (WorkerKind::Vm, spec.vm_workers),
        (WorkerKind::Io, spec.io_workers),
        (WorkerKind::Hdd, spec.hdd_workers),
    ];
    for (kind, n) in kinds {
        for i in 0..n {
            let guard = LiveGuard::new(&LIVE_STRESS);
            let stop = Arc::clone(&stop);
            let (vm_bytes, hdd_bytes) = (spec.vm_bytes, spec.hdd_bytes);
            let spawned = if handle.workers.len() >= limit {
                Err(io::Error::new(io::ErrorKind::WouldBlock, "worker limit reached"))
            } else {
                thread::Builder::new().name(format!("stress-{}-{i}", kind.name())).spawn(move || {
                    let _guard = guard;
                    // Never inherit an RT policy from the spawner.
                    let _ = rtconfig::apply_current_thread(ThreadSched::NORMAL);
                    match kind {
                        WorkerKind::Cpu => cpu_worker(&stop),
                        WorkerKind::Vm => vm_worker(&stop, vm_bytes),
                        WorkerKind::Io => io_worker(&stop),
                        WorkerKind::Hdd => hdd_worker(&stop, hdd_bytes),
                    }
                })
            };
            match spawned {
                Ok(h) => handle.workers.push((kind, h)),
                Err(source) => {
                    let started = handle.workers.len();
                    handle.stop();
                    return Err(LoadError::PartialStart { started, requested: spec.worker_count(), source });
                }
            }
        }
    }
    handle.report.workers = handle.workers.len();
    Ok(handle)
}

impl StressHandle {
    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    /// Stops and joins every worker. Later calls return the same report.
    pub fn stop(&mut self) -> StressReport {
        self.stop.store(true, Ordering::SeqCst);
        for (kind, h) in self.workers.drain(..) {
            let Ok(t) = h.join() else { continue };
            let r = &mut self.report;
            match kind {
                WorkerKind::Cpu => r.cpu_rounds += t.rounds,
                WorkerKind::Vm => {
                    r.vm_rounds += t.rounds;
                    r.vm_alloc_failures += t.failures;
                }
                WorkerKind::Io => r.io_syncs += t.rounds,
                WorkerKind::Hdd => {
                    r.hdd_files += t.rounds;
                    r.hdd_errors += t.failures;
                }
            }
        }
        self.report
    }
}

impl Drop for StressHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn default_packet() -> usize {
    DEFAULT_PACKET
}

/// Constant-bit-rate flow. `rate` counts UDP payload bits per second in one
/// direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbrSpec {
    pub rate: u64,
    #[serde(default = "default_packet")]
    pub packet_size: usize,
    pub dest: Endpoint,
    /// Runs until stopped when absent.
    #[serde(default, with = "humantime_serde")]
    pub duration: Option<Duration>,
    /// Upper bound for hosts that cannot sustain `rate`.
    #[serde(default)]
    pub rate_cap: Option<u64>,
}

impl CbrSpec {
    pub fn new(rate: u64, dest: Endpoint) -> Self {
        Self { rate, packet_size: DEFAULT_PACKET, dest, duration: None, rate_cap: None }
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        if self.effective_rate() == 0 {
            return Err(LoadError::ZeroRate);
        }
        if !(MIN_PACKET..=MAX_PACKET).contains(&self.packet_size) {
            return Err(LoadError::PacketSize(self.packet_size));
        }
        Ok(())
    }

    pub fn effective_rate(&self) -> u64 {
        self.rate_cap.map_or(self.rate, |cap| self.rate.min(cap))
    }

    pub fn packets_per_second(&self) -> f64 {
        self.effective_rate() as f64 / (self.packet_size * 8) as f64
    }

    /// Send time of packet `k` relative to the first one.
    pub fn offset_ns(&self, k: u64) -> u64 {
        let bits = (self.packet_size * 8) as u128;
        (k as u128 * bits * 1_000_000_000 / self.effective_rate() as u128) as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub target_bps: u64,
    pub packets: u64,
    pub bytes: u64,
    pub send_failures: u64,
    /// Over the span from the first to the last scheduled send.
    pub achieved_bps: Option<f64>,
}

/// Paced sender. Stops on drop.
#[derive(Debug)]
pub struct TrafficHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<TrafficReport>>,
    report: Option<TrafficReport>,
}

pub fn start_cbr(spec: &CbrSpec) -> Result<TrafficHandle, LoadError> {
    spec.validate()?;
    let socket = TrackedSocket::for_remote(spec.dest.socket_addr())?;
    socket.connect(spec.dest.socket_addr())?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let spec = spec.clone();
    let guard = LiveGuard::new(&LIVE_TRAFFIC);
    let thread = thread::Builder::new().name("cbr-send".into()).spawn(move || {
        let _guard = guard;
        let _ = rtconfig::apply_current_thread(ThreadSched::NORMAL);
        send_loop(&spec, &socket, &flag)
    })?;
    Ok(TrafficHandle { stop, thread: Some(thread), report: None })
}

fn send_loop(spec: &CbrSpec, socket: &TrackedSocket, stop: &AtomicBool) -> TrafficReport {
    let clock = MonotonicClock;
    let mut report = TrafficReport { target_bps: spec.effective_rate(), ..Default::default() };
    let mut buf = vec![0u8; spec.packet_size];
    let t0 = clock.now_ns();
    let end = spec.duration.map(|d| t0 + d.as_nanos() as u64);
    let mut k = 0u64;
    let mut last_sent = t0;
    while !stop.load(Ordering::Relaxed) {
        let at = t0 + spec.offset_ns(k);
        if end.is_some_and(|e| at >= e) {
            break;
        }
        // Short naps keep stop() responsive at low rates.
        while clock.now_ns() < at && !stop.load(Ordering::Relaxed) {
            clock.sleep_until_ns(at.min(clock.now_ns() + 20_000_000));
        }
        if stop.load(Ordering::Relaxed) {
            break;
        }
        buf[..SEQ_HEADER].copy_from_slice(&k.to_be_bytes());
        match socket.send(&buf) {
            Ok(n) => {
                report.packets += 1;
                report.bytes += n as u64;
                last_sent = at;
            }
            Err(_) => report.send_failures += 1,
        }
        k += 1;
    }
    if report.packets > 1 && last_sent > t0 {
        let span = (last_sent - t0) as f64 / 1e9;
        let per_packet = report.bytes as f64 / report.packets as f64;
        report.achieved_bps = Some((report.packets - 1) as f64 * per_packet * 8.0 / span);
    }
    report
}

impl TrafficHandle {
    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    pub fn stop(&mut self) -> TrafficReport {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            self.report = Some(t.join().unwrap_or_default());
        }
        self.report.unwrap_or_default()
    }
}

impl Drop for TrafficHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub packets: u64,
    pub bytes: u64,
    /// Sequence numbers never seen below the highest one seen.
    pub lost: u64,
    pub malformed: u64,
    /// Received bytes over the arrival span, scaled by `n / (n - 1)`.
    pub rate_bps: Option<f64>,
}

#[derive(Debug, Default)]
struct SinkShared {
    packets: AtomicU64,
}

/// Counts traffic arriving on one port. Stops on drop.
#[derive(Debug)]
pub struct CbrSink {
    stop: Arc<AtomicBool>,
    shared: Arc<SinkShared>,
    local: Endpoint,
    thread: Option<JoinHandle<SinkReport>>,
    report: Option<SinkReport>,
}

const SINK_RCVBUF: usize = 4 << 20;

impl CbrSink {
    /// Port 0 picks a free port; [`CbrSink::local`] reports it.
    pub fn bind(local: SocketAddr) -> Result<Self, LoadError> {
        let socket = TrackedSocket::bind(local)?;
        let _ = socket.set_buffer_sizes(Some(SINK_RCVBUF), None);
        socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        let bound = socket.local_addr()?;
        let local = Endpoint::new(bound.ip(), bound.port()).map_err(|e| io::Error::other(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(SinkShared::default());
        let (flag, sh) = (Arc::clone(&stop), Arc::clone(&shared));
        let guard = LiveGuard::new(&LIVE_TRAFFIC);
        let thread = thread::Builder::new().name("cbr-sink".into()).spawn(move || {
            let _guard = guard;
            let _ = rtconfig::apply_current_thread(ThreadSched::NORMAL);
            sink_loop(&socket, &flag, &sh)
        })?;
        Ok(Self { stop, shared, local, thread: Some(thread), report: None })
    }

    pub fn local(&self) -> Endpoint {
        self.local
    }

    pub fn packets(&self) -> u64 {
        self.shared.packets.load(Ordering::Relaxed)
    }

    pub fn stop(&mut self) -> SinkReport {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            self.report = Some(t.join().unwrap_or_default());
        }
        self.report.unwrap_or_default()
    }
}

impl Drop for CbrSink {
    fn drop(&mut self) {
        self.stop();
    }
}

fn sink_loop(socket: &TrackedSocket, stop: &AtomicBool, shared: &SinkShared) -> SinkReport {
    let clock = MonotonicClock;
    let mut report = SinkReport::default();
    let mut buf = vec![0u8; 65_536];
    let (mut first, mut last) = (None, 0u64);
    let mut highest: Option<u64> = None;
    while !stop.load(Ordering::Relaxed) {
        let n = match socket.recv(&mut buf) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(_) => continue,
        };
        let now = clock.now_ns();
        if n < SEQ_HEADER {
            report.malformed += 1;
            continue;
        }
        let seq = u64::from_be_bytes(buf[..SEQ_HEADER].try_into().expect("8 bytes"));
        first.get_or_insert(now);
        last = now;
        report.packets += 1;
        report.bytes += n as u64;
        highest = Some(highest.map_or(seq, |h| h.max(seq)));
        shared.packets.store(report.packets, Ordering::Relaxed);
    }
    if let Some(h) = highest {
        report.lost = (h + 1).saturating_sub(report.packets);
    }
    if let Some(f) = first {
        if report.packets > 1 && last > f {
            let n = report.packets as f64;
            let span = (last - f) as f64 / 1e9;
            report.rate_bps = Some(report.bytes as f64 * 8.0 / (span * n / (n - 1.0)));
        }
    }
    report
}
