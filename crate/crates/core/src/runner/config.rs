//! Experiment matrix files.
//!
//! A matrix is TOML with one `[[experiment]]` table per run. Keys are
//! grouped by prefix (`cycle.*`, `qos.*`, `rt.*`, `stress.*`, `traffic.*`,
//! `endpoints.*`, `wire.*`); unknown keys are rejected.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::CycleConfig;
use crate::loadgen::{StressSpec, DEFAULT_PACKET, MAX_PACKET, MIN_PACKET};
use crate::pubsub::{Endpoint, QosProfile};
use crate::rtconfig::RtProfile;
use crate::wire::{DEFAULT_MAX_DATAGRAM, MAX_DATAGRAM, MIN_DATAGRAM};

/// Shortest accepted measurement window in a matrix file.
pub const MIN_DURATION: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: experiment `{id}`: `{key}`: {message}")]
    Constraint { path: PathBuf, line: usize, id: String, key: String, message: String },
    #[error("{path}:{line}: duplicate experiment id `{id}` (first defined on line {first_line})")]
    DuplicateId { path: PathBuf, line: usize, first_line: usize, id: String },
    #[error("{path}: no experiment with id `{id}`")]
    UnknownId { path: PathBuf, id: String },
}

impl ConfigError {
    /// The offending key, for constraint violations.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Constraint { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Client,
    Server,
    BothLoopback,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Server => "server",
            Role::BothLoopback => "both-loopback",
        }
    }
}

fn default_packet() -> usize {
    DEFAULT_PACKET
}
fn default_true() -> bool {
    true
}

/// Background traffic. The rate applies to each direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    /// Bits per second of UDP payload.
    pub rate: u64,
    #[serde(default = "default_packet")]
    pub packet_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_cap: Option<u64>,
    /// Send server-to-client as well as client-to-server.
    #[serde(default = "default_true")]
    pub bidirectional: bool,
}

fn ep(s: &str) -> Endpoint {
    s.parse().expect("valid literal endpoint")
}
fn default_control() -> Endpoint {
    ep("127.0.0.1:7400")
}
fn default_ping() -> Endpoint {
    ep("127.0.0.1:7401")
}
fn default_pong() -> Endpoint {
    ep("127.0.0.1:7402")
}
fn default_server_traffic() -> Endpoint {
    ep("127.0.0.1:7411")
}
fn default_client_traffic() -> Endpoint {
    ep("127.0.0.1:7412")
}

/// Where each side listens. Pings go to `ping` (server side), pongs to
/// `pong` (client side); each side sinks background traffic on its own
/// traffic port and sends to the other's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    #[serde(default = "default_control")]
    pub control: Endpoint,
    #[serde(default = "default_ping")]
    pub ping: Endpoint,
    #[serde(default = "default_pong")]
    pub pong: Endpoint,
    #[serde(default = "default_server_traffic")]
    pub server_traffic: Endpoint,
    #[serde(default = "default_client_traffic")]
    pub client_traffic: Endpoint,
}

impl Default for Endpoints {
    fn default() -> Self {
        Self {
            control: default_control(),
            ping: default_ping(),
            pong: default_pong(),
            server_traffic: default_server_traffic(),
            client_traffic: default_client_traffic(),
        }
    }
}

fn default_max_datagram() -> usize {
    DEFAULT_MAX_DATAGRAM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireConfig {
    #[serde(default = "default_max_datagram")]
    pub max_datagram: usize,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self { max_datagram: DEFAULT_MAX_DATAGRAM }
    }
}

fn default_role() -> Role {
    Role::BothLoopback
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default)]
    pub cycle: CycleConfig,
    #[serde(default)]
    pub qos: QosProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rt: Option<RtProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress: Option<StressSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficConfig>,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub wire: WireConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn loopback(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            description: None,
            role: Role::BothLoopback,
            cycle: CycleConfig::default(),
            qos: QosProfile::default(),
            rt: None,
            stress: None,
            traffic: None,
            endpoints: Endpoints::default(),
            wire: WireConfig::default(),
            output_dir: None,
        }
    }

    /// Checks everything that can be checked without touching the system,
    /// except the minimum matrix duration. Returns `(key, message)`.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.id.trim().is_empty() {
            return Err(("id".into(), "must not be empty".into()));
        }
        self.cycle.validate().map_err(|e| (e.key.to_string(), e.message))?;
        if !(MIN_DATAGRAM..=MAX_DATAGRAM).contains(&self.wire.max_datagram) {
            return Err((
                "wire.max_datagram".into(),
                format!("{} outside {MIN_DATAGRAM}..={MAX_DATAGRAM}", self.wire.max_datagram),
            ));
        }
        if let Some(rt) = &self.rt {
            rt.validate().map_err(|e| ("rt".to_string(), e.to_string()))?;
        }
        if let Some(s) = &self.stress {
            if s.worker_count() == 0 {
                return Err(("stress".into(), "at least one worker is required".into()));
            }
        }
        if let Some(t) = &self.traffic {
            if t.rate == 0 || t.rate_cap == Some(0) {
                return Err(("traffic.rate".into(), "must be positive".into()));
            }
            if !(MIN_PACKET..=MAX_PACKET).contains(&t.packet_size) {
                return Err((
                    "traffic.packet_size".into(),
                    format!("{} outside {MIN_PACKET}..={MAX_PACKET}", t.packet_size),
                ));
            }
        }
        let e = &self.endpoints;
        let ports = [
            ("endpoints.ping", e.ping.port()),
            ("endpoints.pong", e.pong.port()),
            ("endpoints.server_traffic", e.server_traffic.port()),
            ("endpoints.client_traffic", e.client_traffic.port()),
        ];
        if self.role == Role::BothLoopback {
            for (i, (key, port)) in ports.iter().enumerate() {
                if let Some((other, _)) = ports[..i].iter().find(|(_, p)| p == port) {
                    return Err((key.to_string(), format!("port {port} already used by {other}")));
                }
            }
        }
        Ok(())
    }

    /// Switches to the full-length measurement window.
    pub fn with_paper_duration(mut self) -> Self {
        self.cycle.duration = self.cycle.paper_duration;
        self
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    experiment: Vec<toml::Spanned<ExperimentConfig>>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses a matrix from text. `path` is only used in messages.
pub fn parse_matrix(text: &str, path: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let file: MatrixFile = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let mut seen: Vec<(String, usize)> = Vec::new();
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(file.experiment.len());
    for spanned in file.experiment {
        let line = line_of(text, spanned.span().start);
        let mut cfg = spanned.into_inner();
        if !ids.insert(cfg.id.clone()) {
            let first_line = seen.iter().find(|(id, _)| *id == cfg.id).map_or(0, |(_, l)| *l);
            return Err(ConfigError::DuplicateId { path: path.to_path_buf(), line, first_line, id: cfg.id });
        }
        seen.push((cfg.id.clone(), line));
        let constraint = |key: String, message: String, id: &str| ConfigError::Constraint {
            path: path.to_path_buf(),
            line,
            id: id.to_string(),
            key,
            message,
        };
        cfg.validate().map_err(|(k, m)| constraint(k, m, &cfg.id))?;
        for (key, d) in [("cycle.duration", cfg.cycle.duration), ("cycle.paper_duration", cfg.cycle.paper_duration)] {
            if d < MIN_DURATION {
                return Err(constraint(key.into(), format!("{d:?} is shorter than {MIN_DURATION:?}"), &cfg.id));
            }
        }
        if cfg.output_dir.is_none() {
            cfg.output_dir = file.output_dir.clone();
        }
        out.push(cfg);
    }
    Ok(out)
}

pub fn load_matrix(path: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_matrix(&text, path)
}

/// Keeps only the experiment named `id`.
pub fn select(matrix: Vec<ExperimentConfig>, id: &str, path: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let picked: Vec<_> = matrix.into_iter().filter(|c| c.id == id).collect();
    if picked.is_empty() {
        return Err(ConfigError::UnknownId { path: path.to_path_buf(), id: id.to_string() });
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rtconfig::Policy;

    fn parse(text: &str) -> Result<Vec<ExperimentConfig>, ConfigError> {
        parse_matrix(text, Path::new("m.toml"))
    }

    #[test]
    fn one_experiment_with_defaults() {
        let m = parse("[[experiment]]\nid = \"test1.A\"\n").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].id, "test1.A");
        assert_eq!(m[0].role, Role::BothLoopback);
        assert_eq!(m[0].cycle, CycleConfig::default());
        assert_eq!(m[0].qos.depth(), 1);
        assert!(m[0].rt.is_none() && m[0].stress.is_none() && m[0].traffic.is_none());
    }

    #[test]
    fn dotted_keys_fill_sections() {
        let text = r#"
output_dir = "out"

[[experiment]]
id = "test2.D"
role = "client"
cycle.duration = "2m"
cycle.deadline = "5ms"
qos.depth = 1
rt.policy = "FIFO"
rt.cycle_prio = 80
rt.transport_prio = 75
rt.eth_irq_prio = 90
rt.softirq_prio = 60
stress.cpu_workers = 8
stress.vm_workers = 8
traffic.rate = 40_000_000
endpoints.ping = "10.0.0.2:7401"
wire.max_datagram = 512
"#;
        let m = parse(text).unwrap();
        let c = &m[0];
        assert_eq!(c.role, Role::Client);
        assert_eq!(c.cycle.duration, Duration::from_secs(120));
        assert_eq!(c.cycle.deadline, Duration::from_millis(5));
        let rt = c.rt.as_ref().unwrap();
        assert_eq!((rt.policy, rt.cycle_prio, rt.transport_prio), (Policy::Fifo, 80, 75));
        assert_eq!(c.stress.as_ref().unwrap().worker_count(), 16);
        let t = c.traffic.as_ref().unwrap();
        assert_eq!((t.rate, t.packet_size, t.bidirectional), (40_000_000, 1250, true));
        assert_eq!(c.endpoints.ping.to_string(), "10.0.0.2:7401");
        assert_eq!(c.wire.max_datagram, 512);
        assert_eq!(c.output_dir.as_deref(), Some(Path::new("out")));
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = "[[experiment]]\nid = \"a\"\n\n[[experiment]]\nid = \"a\"\n";
        match parse(text) {
            Err(e @ ConfigError::DuplicateId { .. }) => {
                let msg = e.to_string();
                assert!(msg.contains("`a`"), "{msg}");
                assert!(msg.contains("m.toml:4"), "{msg}");
            }
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn deadline_beyond_loss_timeout_cites_loss_timeout() {
        let text = "[[experiment]]\nid = \"x\"\ncycle.deadline = \"600ms\"\ncycle.period = \"1s\"\n";
        let e = parse(text).unwrap_err();
        assert_eq!(e.key(), Some("cycle.loss_timeout"), "{e}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "[[experiment]]\nid = \"x\"\ncycle.perod = \"10ms\"\n";
        match parse(text) {
            Err(ConfigError::Parse { line, message, .. }) => {
                assert_eq!(line, 3, "{message}");
                assert!(message.contains("perod"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let e = parse("[[experiment]]\nid = \"x\"\n\nstrees.cpu_workers = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 4, .. }), "{e}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let e = parse("[[experiment]]\nid = \"x\"\ncycle.period = 10ms\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn short_duration_rejected() {
        let e = parse("[[experiment]]\nid = \"x\"\ncycle.duration = \"59s\"\n").unwrap_err();
        assert_eq!(e.key(), Some("cycle.duration"));
    }

    #[test]
    fn other_constraints_named_by_key() {
        let cases = [
            ("qos.reliability = \"reliable\"", None),
            ("traffic.rate = 0", Some("traffic.rate")),
            ("traffic.rate = 1\ntraffic.packet_size = 2000", Some("traffic.packet_size")),
            ("wire.max_datagram = 10", Some("wire.max_datagram")),
            ("stress.vm_bytes = 1", Some("stress")),
            ("rt.cycle_prio = 50\nrt.transport_prio = 60", Some("rt")),
            ("endpoints.pong = \"127.0.0.1:7401\"", Some("endpoints.pong")),
        ];
        for (extra, key) in cases {
            let text = format!("[[experiment]]\nid = \"x\"\n{extra}\n");
            let e = parse(&text).unwrap_err();
            assert_eq!(e.key(), key, "{extra}: {e}");
        }
    }

    #[test]
    fn paper_duration_switch() {
        let m = parse("[[experiment]]\nid = \"test5\"\ncycle.paper_duration = \"12h\"\n").unwrap();
        let c = m[0].clone().with_paper_duration();
        assert_eq!(c.cycle.duration, Duration::from_secs(43_200));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = ExperimentConfig::loopback("t");
        c.rt = Some(RtProfile::kernel_tuned());
        c.stress = Some(StressSpec::uniform(2));
        c.traffic = Some(TrafficConfig { rate: 1_000_000, packet_size: 1250, rate_cap: None, bidirectional: false });
        let text = toml::to_string(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn select_unknown_id() {
        let m = parse("[[experiment]]\nid = \"a\"\n").unwrap();
        assert!(matches!(select(m, "b", Path::new("m.toml")), Err(ConfigError::UnknownId { .. })));
    }
}
