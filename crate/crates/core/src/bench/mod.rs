//! Round-trip (ping-pong) benchmark: sample types, classification, the
//! fixed-period client, and the echo server.

pub mod client;
pub mod clock;
pub mod link;
pub mod server;
pub mod sim;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::MAX_PAYLOAD;

pub use client::{run_client, ClientCounters, ClientEvent, ClientObserver, ClientRun, EventLog};
pub use clock::{Clock, MonotonicClock, SimClock};
pub use link::{LoopbackStub, Mailbox, PingLink, PubSubLink};
pub use server::{run_server, start_server, ServerConfig, ServerHandle, ServerStats};

pub const PING_TOPIC: u16 = 1;
pub const PONG_TOPIC: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleClass {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "MISSED_DEADLINE")]
    MissedDeadline,
    #[serde(rename = "LOST")]
    Lost,
}

impl SampleClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleClass::Ok => "OK",
            SampleClass::MissedDeadline => "MISSED_DEADLINE",
            SampleClass::Lost => "LOST",
        }
    }
}

impl fmt::Display for SampleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "OK" => Ok(SampleClass::Ok),
            "MISSED_DEADLINE" => Ok(SampleClass::MissedDeadline),
            "LOST" => Ok(SampleClass::Lost),
            other => Err(format!("unknown sample class {other:?}")),
        }
    }
}

/// Classifies one round trip. `rtt_us` is `None` when no reply arrived
/// within the loss timeout.
pub fn classify(rtt_us: Option<u64>, deadline_us: u64) -> SampleClass {
    match rtt_us {
        None => SampleClass::Lost,
        Some(rtt) if rtt > deadline_us => SampleClass::MissedDeadline,
        Some(_) => SampleClass::Ok,
    }
}

/// One round-trip record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RttSample {
    /// Index within the measurement window, gap-free from 0.
    pub seq: u64,
    /// Taken immediately before the ping is published.
    pub t1_ns: u64,
    /// Taken at entry of the reply callback.
    pub t2_ns: Option<u64>,
    pub rtt_us: Option<u64>,
    pub class: SampleClass,
}

impl RttSample {
    pub fn new(seq: u64, t1_ns: u64, t2_ns: Option<u64>, deadline_us: u64) -> Self {
        let rtt_us = t2_ns.map(|t2| t2.saturating_sub(t1_ns) / 1000);
        Self { seq, t1_ns, t2_ns, rtt_us, class: classify(rtt_us, deadline_us) }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("`{key}`: {message}")]
pub struct ConstraintError {
    pub key: &'static str,
    pub message: String,
}

fn constraint(key: &'static str, message: String) -> Result<(), ConstraintError> {
    Err(ConstraintError { key, message })
}

/// Timing of the cycle loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleConfig {
    #[serde(with = "humantime_serde", default = "default_period")]
    pub period: Duration,
    #[serde(with = "humantime_serde", default = "default_period")]
    pub deadline: Duration,
    #[serde(with = "humantime_serde", default = "default_loss_timeout")]
    pub loss_timeout: Duration,
    #[serde(with = "humantime_serde", default = "default_duration")]
    pub duration: Duration,
    /// Excluded from statistics; rounded up to whole periods.
    #[serde(with = "humantime_serde", default = "default_warmup")]
    pub warmup: Duration,
    /// Duration used instead of `duration` for full-length runs.
    #[serde(with = "humantime_serde", default = "default_paper_duration")]
    pub paper_duration: Duration,
    #[serde(default = "default_payload")]
    pub payload_size: usize,
}

fn default_period() -> Duration {
    Duration::from_millis(10)
}
fn default_loss_timeout() -> Duration {
    Duration::from_millis(500)
}
fn default_duration() -> Duration {
    Duration::from_secs(60)
}
fn default_warmup() -> Duration {
    Duration::from_secs(5)
}
fn default_paper_duration() -> Duration {
    Duration::from_secs(600)
}
fn default_payload() -> usize {
    500
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            period: default_period(),
            deadline: default_period(),
            loss_timeout: default_loss_timeout(),
            duration: default_duration(),
            warmup: default_warmup(),
            paper_duration: default_paper_duration(),
            payload_size: default_payload(),
        }
    }
}

impl CycleConfig {
    pub fn deadline_us(&self) -> u64 {
        self.deadline.as_micros() as u64
    }

    /// Checks `0 < deadline <= period <= loss_timeout <= duration`.
    pub fn validate(&self) -> Result<(), ConstraintError> {
        let ms = |d: Duration| format!("{}", humantime_serde::re::humantime::format_duration(d));
        if self.period.is_zero() {
            return constraint("cycle.period", "must be positive".into());
        }
        if self.deadline.is_zero() {
            return constraint("cycle.deadline", "must be positive".into());
        }
        if self.deadline > self.loss_timeout {
            return constraint(
                "cycle.loss_timeout",
                format!("{} is shorter than cycle.deadline {}", ms(self.loss_timeout), ms(self.deadline)),
            );
        }
        if self.deadline > self.period {
            return constraint(
                "cycle.deadline",
                format!("{} exceeds cycle.period {}", ms(self.deadline), ms(self.period)),
            );
        }
        if self.period > self.loss_timeout {
            return constraint(
                "cycle.loss_timeout",
                format!("{} is shorter than cycle.period {}", ms(self.loss_timeout), ms(self.period)),
            );
        }
        if self.loss_timeout > self.duration {
            return constraint(
                "cycle.duration",
                format!("{} is shorter than cycle.loss_timeout {}", ms(self.duration), ms(self.loss_timeout)),
            );
        }
        if self.payload_size > MAX_PAYLOAD {
            return constraint("cycle.payload_size", format!("{} exceeds {MAX_PAYLOAD}", self.payload_size));
        }
        Ok(())
    }
}
