//! Experiment orchestration: configuration, run sequencing, result files
//! and the two-host control channel.
//!
//! A run brings the system up in a fixed order and tears it down in
//! reverse: RT profile, echo server (loopback), stress, traffic, then the
//! cycle thread's warm-up and measurement window.

pub mod config;
pub mod control;
pub mod report;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{load_matrix, parse_matrix, ConfigError, Endpoints, ExperimentConfig, Role, TrafficConfig};
pub use report::{render_report, table_row, RunSummary};

use crate::bench::clock::{Clock, MonotonicClock};
use crate::bench::link::LinkOptions;
use crate::bench::{run_client, start_server, ClientCounters, PubSubLink, ServerConfig, ServerHandle, ServerStats};
use crate::loadgen::{
    self, CbrSink, CbrSpec, LoadError, SinkReport, StressHandle, StressReport, TrafficHandle, TrafficReport,
};
use crate::metrics::{compute_stats, export_timeseries, LatencyStats, MetricsError};
use crate::pubsub::{Endpoint, PubSubError, PublisherOptions, SubscriberOptions, SubscriberStats};
use crate::rtconfig::{self, AppliedReport, Mode, RtError, RtProfile, RtSession, SchedBackend, SystemBackend};
use control::{Command, Connection, ControlClient, ControlError, PROTOCOL};

pub const RESULT_META: &str = "result.meta";
pub const TIMESERIES: &str = "timeseries.csv";
pub const EVENTS: &str = "events.log";
pub const REPORT: &str = "report.md";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("experiment `{id}`: `{key}`: {message}")]
    Invalid { id: String, key: String, message: String },
    #[error("experiment `{0}` has role server; run it with `serve`")]
    ServerRole(String),
    #[error("real-time profile: {0}")]
    Rt(#[from] RtError),
    #[error("peer: {0}")]
    Peer(#[from] ControlError),
    #[error("transport: {0}")]
    Transport(#[from] PubSubError),
    #[error("load generator: {0}")]
    Load(#[from] LoadError),
    #[error("writing {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error("time-series: {0}")]
    Metrics(#[from] MetricsError),
    #[error("cycle thread panicked")]
    CycleThread,
    #[error("result metadata: {0}")]
    Meta(String),
}

fn output_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Output { path: path.to_path_buf(), source }
}

#[derive(Clone)]
pub struct RunOptions {
    /// Overrides each experiment's `output_dir`.
    pub output_dir: Option<PathBuf>,
    /// Abort on any RT setting that is not applied, whatever the profile says.
    pub strict_rt: bool,
    pub paper_durations: bool,
    pub backend: Arc<dyn SchedBackend>,
    /// Connect timeout and the margin for peer setup and teardown.
    pub peer_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            output_dir: None,
            strict_rt: false,
            paper_durations: false,
            backend: Arc::new(SystemBackend::default()),
            peer_timeout: Duration::from_secs(10),
        }
    }
}

impl std::fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunOptions")
            .field("output_dir", &self.output_dir)
            .field("strict_rt", &self.strict_rt)
            .field("paper_durations", &self.paper_durations)
            .field("peer_timeout", &self.peer_timeout)
            .finish()
    }
}

impl RunOptions {
    fn mode(&self, profile: &RtProfile) -> Mode {
        if self.strict_rt || profile.strict {
            Mode::Strict
        } else {
            Mode::BestEffort
        }
    }

    pub fn output_root(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.output_dir.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results"))
    }
}

/// Timestamped orchestration steps on the monotonic clock shared with the
/// samples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunEvents {
    pub entries: Vec<(u64, String)>,
}

impl RunEvents {
    pub fn record(&mut self, what: impl Into<String>) {
        self.entries.push((MonotonicClock.now_ns(), what.into()));
    }

    pub fn at(&mut self, t_ns: u64, what: impl Into<String>) {
        self.entries.push((t_ns, what.into()));
    }

    /// Time of the first entry whose text starts with `name`.
    pub fn time_of(&self, name: &str) -> Option<u64> {
        self.entries.iter().find(|(_, e)| e.split_whitespace().next() == Some(name)).map(|(t, _)| *t)
    }

    pub fn to_text(&self) -> String {
        let mut sorted = self.entries.clone();
        sorted.sort_by_key(|(t, _)| *t);
        sorted.iter().map(|(t, e)| format!("{t} {e}\n")).collect()
    }

    pub fn parse(text: &str) -> Option<Self> {
        let mut entries = Vec::new();
        for line in text.lines() {
            let (t, e) = line.split_once(' ')?;
            entries.push((t.parse().ok()?, e.to_string()));
        }
        Some(Self { entries })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub direction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent: Option<TrafficReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received: Option<SinkReport>,
}

/// What a run leaves behind; serialized as `result.meta`.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub role: Role,
    /// Every requested RT setting was applied and read back.
    pub rt_verified: bool,
    pub stats: LatencyStats,
    pub timeseries: PathBuf,
    pub timeseries_rows: usize,
    pub client: ClientCounters,
    pub subscriber: SubscriberStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub applied: Option<AppliedReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server: Option<ServerStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stress: Option<StressReport>,
    pub traffic: Vec<FlowReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer: Option<toml::Table>,
    pub config: ExperimentConfig,
    #[serde(skip)]
    pub run_dir: PathBuf,
    #[serde(skip)]
    pub events: RunEvents,
}

impl RunResult {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            id: self.id.clone(),
            description: self.description.clone(),
            rt_verified: self.rt_verified,
            stats: self.stats.clone(),
        }
    }
}

/// Which ends of the traffic flows this process owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Client,
    Server,
    Both,
}

/// Stress and traffic for one side of an experiment. Dropping it stops
/// everything.
#[derive(Debug, Default)]
struct Disturbance {
    stress: Option<StressHandle>,
    sinks: Vec<(String, CbrSink)>,
    senders: Vec<(String, TrafficHandle)>,
}

#[derive(Debug, Default)]
struct DisturbanceReport {
    stress: Option<StressReport>,
    flows: Vec<FlowReport>,
}

impl Disturbance {
    fn start(cfg: &ExperimentConfig, side: Side, events: &mut RunEvents) -> Result<Self, RunError> {
        let mut d = Disturbance::default();
        if let Some(spec) = &cfg.stress {
            let h = loadgen::start_stress(spec)?;
            events.record(format!("stress_started workers={}", h.worker_count()));
            d.stress = Some(h);
        }
        if let Some(t) = &cfg.traffic {
            let e = &cfg.endpoints;
            let to_server = ("client->server", e.server_traffic);
            let to_client = ("server->client", e.client_traffic);
            let (sink_at, send_to): (Vec<_>, Vec<_>) = match side {
                Side::Client => (vec![to_client], vec![to_server]),
                Side::Server => (vec![to_server], vec![to_client]),
                Side::Both => (vec![to_server, to_client], vec![to_server, to_client]),
            };
            let bidir = |dir: &str| t.bidirectional || dir == "client->server";
            for (dir, ep) in sink_at.into_iter().filter(|(d, _)| bidir(d)) {
                d.sinks.push((dir.to_string(), CbrSink::bind(ep.any_interface().socket_addr())?));
            }
            for (dir, ep) in send_to.into_iter().filter(|(d, _)| bidir(d)) {
                let spec = CbrSpec { packet_size: t.packet_size, rate_cap: t.rate_cap, ..CbrSpec::new(t.rate, ep) };
                d.senders.push((dir.to_string(), loadgen::start_cbr(&spec)?));
            }
            events.record(format!("traffic_started flows={} rate={}", d.senders.len(), t.rate));
        }
        Ok(d)
    }

    fn stop(mut self, events: &mut RunEvents) -> DisturbanceReport {
        let mut report = DisturbanceReport::default();
        if !self.senders.is_empty() || !self.sinks.is_empty() {
            let sent: Vec<(String, TrafficReport)> =
                self.senders.drain(..).map(|(dir, mut h)| (dir, h.stop())).collect();
            events.record("traffic_stopped");
            // Let in-flight datagrams land before the sinks close.
            thread::sleep(Duration::from_millis(50));
            let mut received: Vec<(String, SinkReport)> =
                self.sinks.drain(..).map(|(dir, mut s)| (dir, s.stop())).collect();
            for (dir, s) in sent {
                let r = received.iter().position(|(d, _)| *d == dir).map(|i| received.remove(i).1);
                report.flows.push(FlowReport { direction: dir, sent: Some(s), received: r });
            }
            for (dir, r) in received {
                report.flows.push(FlowReport { direction: dir, sent: None, received: Some(r) });
            }
        }
        if let Some(mut h) = self.stress.take() {
            report.stress = Some(h.stop());
            events.record("stress_stopped");
        }
        report
    }
}

fn apply_rt(cfg: &ExperimentConfig, opts: &RunOptions, events: &mut RunEvents) -> Result<Option<RtSession>, RunError> {
    let Some(profile) = &cfg.rt else {
        events.record("rt_skipped");
        return Ok(None);
    };
    match rtconfig::apply(profile, opts.mode(profile), Arc::clone(&opts.backend)) {
        Ok(session) => {
            events.record(format!("rt_applied verified={}", session.report().rt_verified()));
            Ok(Some(session))
        }
        Err(e) => {
            events.record("rt_aborted");
            Err(e.into())
        }
    }
}

fn subscriber_options(cfg: &ExperimentConfig) -> SubscriberOptions {
    let sched = cfg.rt.as_ref().map(|p| p.transport_sched());
    SubscriberOptions {
        receive_sched: sched,
        callback_sched: sched,
        payload_capacity: cfg.cycle.payload_size.max(1),
        ..SubscriberOptions::default()
    }
}

fn publisher_options(cfg: &ExperimentConfig) -> PublisherOptions {
    PublisherOptions { max_datagram: cfg.wire.max_datagram, ..PublisherOptions::default() }
}

fn echo_server(cfg: &ExperimentConfig) -> Result<ServerHandle, RunError> {
    let e = &cfg.endpoints;
    let server = ServerConfig {
        ping_local: e.ping.any_interface(),
        pong_remote: e.pong,
        qos: cfg.qos,
        publisher: publisher_options(cfg),
        subscriber: subscriber_options(cfg),
    };
    Ok(start_server(&server)?)
}

fn prepare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentConfig, RunError> {
    let cfg = if opts.paper_durations { cfg.clone().with_paper_duration() } else { cfg.clone() };
    cfg.validate().map_err(|(key, message)| RunError::Invalid { id: cfg.id.clone(), key, message })?;
    Ok(cfg)
}

/// Runs one experiment as the client (or both ends on loopback) and writes
/// its result directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunResult, RunError> {
    let cfg = prepare(cfg, opts)?;
    if cfg.role == Role::Server {
        return Err(RunError::ServerRole(cfg.id.clone()));
    }
    let mut events = RunEvents::default();
    events.record(format!("run_started id={} role={}", cfg.id, cfg.role.as_str()));

    let rt = apply_rt(&cfg, opts, &mut events)?;
    let applied = rt.as_ref().map(|s| s.report().clone());
    let rt_verified = applied.as_ref().is_some_and(|a| a.rt_verified());

    let mut peer = None;
    let mut echo = None;
    match cfg.role {
        Role::BothLoopback => {
            echo = Some(echo_server(&cfg)?);
            events.record("server_started");
        }
        Role::Client => {
            let addr = cfg.endpoints.control.socket_addr();
            let mut c = ControlClient::connect(addr, opts.peer_timeout)?;
            c.start(&cfg.id, opts.peer_timeout * 3)?;
            events.record(format!("peer_started addr={addr}"));
            peer = Some(c);
        }
        Role::Server => unreachable!("rejected above"),
    }

    let side = if cfg.role == Role::Client { Side::Client } else { Side::Both };
    let disturbance = Disturbance::start(&cfg, side, &mut events)?;

    let link_opts = LinkOptions { publisher: publisher_options(&cfg), subscriber: subscriber_options(&cfg) };
    let link = PubSubLink::connect(cfg.endpoints.ping, cfg.endpoints.pong.any_interface(), cfg.qos, link_opts)?;
    let cycle = cfg.cycle.clone();
    let cycle_sched = cfg.rt.as_ref().map(|p| (p.cycle_sched(), p.cpu_affinity));
    events.record("warmup_started");
    let worker = thread::Builder::new()
        .name("rtt-cycle".into())
        .spawn(move || {
            if let Some((sched, cpu)) = cycle_sched {
                let (outcome, effective) = rtconfig::apply_current_thread(sched);
                log::debug!("cycle thread scheduling {sched}: {outcome}, now {effective}");
                if let Some(cpu) = cpu {
                    if let Err(e) = rtconfig::pin_current_thread(cpu) {
                        log::warn!("pinning cycle thread to CPU {cpu}: {e}");
                    }
                }
            }
            let mut link = link;
            let run = run_client(&cycle, &MonotonicClock, &mut link, &mut ());
            (run, link)
        })
        .map_err(|e| RunError::Output { path: PathBuf::from("<cycle thread>"), source: e })?;
    let (client_run, link) = worker.join().map_err(|_| RunError::CycleThread)?;
    if let Some(t) = client_run.measurement_start_ns {
        events.at(t, "measurement_started");
    }
    if let Some(t) = client_run.measurement_end_ns {
        events.at(t, "measurement_finished");
    }
    let subscriber = link.close();

    let dist = disturbance.stop(&mut events);
    let server = echo.map(|h| {
        let s = h.stop();
        events.record("server_stopped");
        s
    });
    let peer_result = match peer {
        Some(mut c) => {
            let payload = c.stop(opts.peer_timeout * 3)?;
            events.record("peer_stopped");
            let text = String::from_utf8(payload).map_err(|e| RunError::Meta(e.to_string()))?;
            Some(text.parse::<toml::Table>().map_err(|e| RunError::Meta(e.to_string()))?)
        }
        None => None,
    };
    finish(cfg, rt, applied, rt_verified, client_run, subscriber, server, dist, peer_result, events, opts)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: ExperimentConfig,
    rt: Option<RtSession>,
    applied: Option<AppliedReport>,
    rt_verified: bool,
    client_run: crate::bench::ClientRun,
    subscriber: SubscriberStats,
    server: Option<ServerStats>,
    dist: DisturbanceReport,
    peer: Option<toml::Table>,
    mut events: RunEvents,
    opts: &RunOptions,
) -> Result<RunResult, RunError> {
    if let Some(session) = rt {
        session.restore();
        events.record("rt_restored");
    }
    events.record("run_finished");

    let stats = compute_stats(&client_run.samples);
    let root = opts.output_root(&cfg);
    let run_dir = root.join(dir_name(&cfg.id));
    let mut result = RunResult {
        id: cfg.id.clone(),
        description: cfg.description.clone(),
        role: cfg.role,
        rt_verified,
        stats,
        timeseries: run_dir.join(TIMESERIES),
        timeseries_rows: 0,
        client: client_run.counters,
        subscriber,
        applied,
        server,
        stress: dist.stress,
        traffic: dist.flows,
        peer,
        config: cfg,
        run_dir,
        events,
    };
    write_result(&mut result, &client_run.samples, &root)?;
    Ok(result)
}

fn dir_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

/// Writes every file into a scratch directory, then renames it into place.
fn write_result(result: &mut RunResult, samples: &[crate::bench::RttSample], root: &Path) -> Result<(), RunError> {
    fs::create_dir_all(root).map_err(output_err(root))?;
    let name = dir_name(&result.id);
    let tmp = root.join(format!(".{name}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(output_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(output_err(&tmp))?;

    let ts_path = tmp.join(TIMESERIES);
    let file = fs::File::create(&ts_path).map_err(output_err(&ts_path))?;
    let rows = export_timeseries(samples, BufWriter::new(file))?;
    if rows as u64 != result.stats.total {
        return Err(RunError::Meta(format!("{rows} time-series rows for {} samples", result.stats.total)));
    }
    result.timeseries_rows = rows;

    let meta = toml::to_string(&*result).map_err(|e| RunError::Meta(e.to_string()))?;
    let files = [(RESULT_META, meta), (EVENTS, result.events.to_text()), (REPORT, render_report(&[result.summary()]))];
    for (file, text) in files {
        let p = tmp.join(file);
        fs::write(&p, text).map_err(output_err(&p))?;
    }

    let dest = &result.run_dir;
    if dest.exists() {
        let old = root.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dest, &old).map_err(output_err(dest))?;
        fs::rename(&tmp, dest).map_err(output_err(dest))?;
        fs::remove_dir_all(&old).map_err(output_err(&old))?;
    } else {
        fs::rename(&tmp, dest).map_err(output_err(dest))?;
    }
    Ok(())
}

/// Reads `result.meta` files under `dir` (the directory itself or its
/// immediate subdirectories), in path order.
pub fn load_summaries(dir: &Path) -> Result<Vec<RunSummary>, RunError> {
    let mut metas = Vec::new();
    let direct = dir.join(RESULT_META);
    if direct.is_file() {
        metas.push(direct);
    }
    let entries = fs::read_dir(dir).map_err(output_err(dir))?;
    for entry in entries.flatten() {
        let p = entry.path().join(RESULT_META);
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && p.is_file() {
            metas.push(p);
        }
    }
    metas.sort();
    metas
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(output_err(p))?;
            toml::from_str(&text).map_err(|e| RunError::Meta(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Server side of one experiment: RT profile, stress, traffic and the echo.
struct ServerHalf {
    rt: Option<RtSession>,
    applied: Option<AppliedReport>,
    echo: Option<ServerHandle>,
    disturbance: Option<Disturbance>,
}

#[derive(Debug, Serialize)]
struct PeerResult {
    id: String,
    rt_verified: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    applied: Option<AppliedReport>,
    server: ServerStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    stress: Option<StressReport>,
    traffic: Vec<FlowReport>,
    events: Vec<String>,
}

impl ServerHalf {
    fn start(cfg: &ExperimentConfig, opts: &RunOptions, events: &mut RunEvents) -> Result<Self, RunError> {
        let rt = apply_rt(cfg, opts, events)?;
        let applied = rt.as_ref().map(|s| s.report().clone());
        let mut half = ServerHalf { rt, applied, echo: None, disturbance: None };
        half.echo = Some(echo_server(cfg)?);
        events.record("server_started");
        half.disturbance = Some(Disturbance::start(cfg, Side::Server, events)?);
        Ok(half)
    }

    fn stop(mut self, id: &str, events: &mut RunEvents) -> PeerResult {
        let dist = self.disturbance.take().map(|d| d.stop(events)).unwrap_or_default();
        let server = self.echo.take().map(|h| h.stop()).unwrap_or_default();
        events.record("server_stopped");
        if let Some(s) = self.rt.take() {
            s.restore();
            events.record("rt_restored");
        }
        PeerResult {
            id: id.to_string(),
            rt_verified: self.applied.as_ref().is_some_and(|a| a.rt_verified()),
            applied: self.applied.take(),
            server,
            stress: dist.stress,
            traffic: dist.flows,
            events: events.to_text().lines().map(str::to_string).collect(),
        }
    }
}

/// The listen address for `serve`: the control port of the experiments,
/// which must agree.
pub fn control_address(matrix: &[ExperimentConfig]) -> Result<SocketAddr, RunError> {
    let first = matrix.first().ok_or_else(|| RunError::Meta("empty matrix".into()))?;
    let port = first.endpoints.control.port();
    if let Some(other) = matrix.iter().find(|c| c.endpoints.control.port() != port) {
        return Err(RunError::Invalid {
            id: other.id.clone(),
            key: "endpoints.control".into(),
            message: format!("port differs from `{}` ({port})", first.id),
        });
    }
    Ok(first.endpoints.control.any_interface().socket_addr())
}

/// Serves experiments to remote clients until `stop` is set. One client
/// at a time.
pub fn serve(
    matrix: &[ExperimentConfig],
    listen: SocketAddr,
    opts: &RunOptions,
    stop: &AtomicBool,
) -> Result<(), RunError> {
    let listener = TcpListener::bind(listen).map_err(output_err(Path::new("<control listener>")))?;
    listener.set_nonblocking(true).map_err(output_err(Path::new("<control listener>")))?;
    log::info!("serving {} experiment(s) on {}", matrix.len(), listener.local_addr().map_or(listen, |a| a));
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, addr)) => {
                let _ = stream.set_nonblocking(false);
                log::info!("control connection from {addr}");
                if let Err(e) = serve_connection(matrix, opts, stream) {
                    log::warn!("control session with {addr}: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(50)),
            Err(e) => return Err(RunError::Output { path: PathBuf::from("<control listener>"), source: e }),
        }
    }
    Ok(())
}

fn serve_connection(
    matrix: &[ExperimentConfig],
    opts: &RunOptions,
    stream: std::net::TcpStream,
) -> Result<(), RunError> {
    let mut conn = Connection::new(stream).map_err(ControlError::from)?;
    conn.set_read_timeout(Some(opts.peer_timeout)).map_err(ControlError::from)?;
    match conn.recv()? {
        Command::Hello(v) if v == PROTOCOL => conn.send(&Command::Hello(PROTOCOL.into()))?,
        Command::Hello(v) => {
            conn.send(&Command::Error(format!("unsupported protocol {v}")))?;
            return Err(ControlError::Version(v).into());
        }
        got => return Err(ControlError::Unexpected { expected: "HELLO", got }.into()),
    }
    loop {
        conn.set_read_timeout(None).map_err(ControlError::from)?;
        let id = match conn.recv() {
            Ok(Command::Start(id)) => id,
            Err(ControlError::Closed) => return Ok(()),
            Ok(got) => return Err(ControlError::Unexpected { expected: "START", got }.into()),
            Err(e) => return Err(e.into()),
        };
        let Some(cfg) = matrix.iter().find(|c| c.id == id) else {
            conn.send(&Command::Error(format!("unknown experiment {id}")))?;
            continue;
        };
        let cfg = match prepare(cfg, opts) {
            Ok(c) => c,
            Err(e) => {
                conn.send(&Command::Error(e.to_string()))?;
                continue;
            }
        };
        let mut events = RunEvents::default();
        let half = match ServerHalf::start(&cfg, opts, &mut events) {
            Ok(h) => h,
            Err(e) => {
                conn.send(&Command::Error(e.to_string()))?;
                continue;
            }
        };
        conn.send(&Command::Started)?;
        // The client may take the whole run plus its own setup.
        let budget = cfg.cycle.warmup + cfg.cycle.duration + cfg.cycle.loss_timeout + opts.peer_timeout * 6;
        conn.set_read_timeout(Some(budget)).map_err(ControlError::from)?;
        let got = conn.recv();
        let result = half.stop(&id, &mut events);
        match got {
            Ok(Command::Stop) => {
                let text = toml::to_string(&result).map_err(|e| RunError::Meta(e.to_string()))?;
                conn.send(&Command::Result(text.into_bytes()))?;
            }
            Ok(other) => return Err(ControlError::Unexpected { expected: "STOP", got: other }.into()),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Runs every client-side experiment in order, then writes the combined
/// report to the output root. Stops at the first failure.
pub fn run_matrix(matrix: &[ExperimentConfig], opts: &RunOptions) -> Result<Vec<RunResult>, RunError> {
    let mut results = Vec::new();
    for cfg in matrix.iter().filter(|c| c.role != Role::Server) {
        log::info!("running {}", cfg.id);
        results.push(run(cfg, opts)?);
    }
    let mut roots: Vec<PathBuf> = results.iter().map(|r| opts.output_root(&r.config)).collect();
    roots.sort();
    roots.dedup();
    for root in roots {
        let summaries: Vec<RunSummary> =
            results.iter().filter(|r| opts.output_root(&r.config) == root).map(RunResult::summary).collect();
        let path = root.join(REPORT);
        let mut f = fs::File::create(&path).map_err(output_err(&path))?;
        f.write_all(render_report(&summaries).as_bytes()).map_err(output_err(&path))?;
    }
    Ok(results)
}

/// Endpoints on free loopback ports, for tests and ad-hoc runs.
pub fn free_loopback_endpoints() -> io::Result<Endpoints> {
    let free_udp = || -> io::Result<Endpoint> {
        let s = std::net::UdpSocket::bind("127.0.0.1:0")?;
        let port = s.local_addr()?.port();
        Endpoint::localhost(port).map_err(|e| io::Error::other(e.to_string()))
    };
    let tcp = TcpListener::bind("127.0.0.1:0")?;
    let control = Endpoint::localhost(tcp.local_addr()?.port()).map_err(|e| io::Error::other(e.to_string()))?;
    // Hold all sockets until every port is picked so none repeats.
    let ports = [free_udp()?, free_udp()?, free_udp()?, free_udp()?];
    let mut uniq = ports.to_vec();
    uniq.sort_by_key(|e| e.port());
    uniq.dedup_by_key(|e| e.port());
    if uniq.len() != ports.len() {
        return free_loopback_endpoints();
    }
    Ok(Endpoints { control, ping: ports[0], pong: ports[1], server_traffic: ports[2], client_traffic: ports[3] })
}
