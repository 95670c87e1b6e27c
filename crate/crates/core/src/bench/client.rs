//! The fixed-period ping client.
//!
//! Wakeups target `t0 + k * period` on an absolute schedule. One ping is
//! published per available cycle and at most one ping is ever in flight: a
//! cycle is available only if the previous ping was resolved (replied to or
//! declared lost) strictly before the cycle's target time. A ping with no
//! reply within `loss_timeout` is retired as lost; a reply that shows up
//! afterwards is counted as stale and never reclassifies the sample.

use serde::{Deserialize, Serialize};

use super::clock::Clock;
use super::link::PingLink;
use super::{CycleConfig, RttSample, PING_TOPIC};
use crate::wire::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientEvent {
    Wakeup {
        k: u64,
        target_ns: u64,
        at_ns: u64,
    },
    /// Wakeup arrived more than one period late; cycles `from_k..to_k` were skipped.
    Skipped {
        from_k: u64,
        to_k: u64,
    },
    Publish {
        wire_seq: u64,
        t1_ns: u64,
    },
    Reply {
        wire_seq: u64,
        t2_ns: u64,
    },
    Lost {
        wire_seq: u64,
        at_ns: u64,
    },
}

pub trait ClientObserver {
    fn on_event(&mut self, _event: &ClientEvent) {}
    fn measurement_started(&mut self, _at_ns: u64) {}
    fn measurement_finished(&mut self, _at_ns: u64) {}
}

impl ClientObserver for () {}

/// Records every client event. Reserve capacity up front to keep the cycle
/// loop allocation-free.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    pub events: Vec<ClientEvent>,
    pub measurement: (Option<u64>, Option<u64>),
}

impl EventLog {
    pub fn with_capacity(n: usize) -> Self {
        Self { events: Vec::with_capacity(n), measurement: (None, None) }
    }

    /// Checks that publishes and resolutions strictly alternate.
    pub fn at_most_one_in_flight(&self) -> bool {
        let mut in_flight: Option<u64> = None;
        for e in &self.events {
            match *e {
                ClientEvent::Publish { wire_seq, .. } => {
                    if in_flight.is_some() {
                        return false;
                    }
                    in_flight = Some(wire_seq);
                }
                ClientEvent::Reply { wire_seq, .. } | ClientEvent::Lost { wire_seq, .. } => {
                    if in_flight != Some(wire_seq) {
                        return false;
                    }
                    in_flight = None;
                }
                _ => {}
            }
        }
        true
    }
}

impl ClientObserver for EventLog {
    fn on_event(&mut self, event: &ClientEvent) {
        self.events.push(*event);
    }
    fn measurement_started(&mut self, at_ns: u64) {
        self.measurement.0 = Some(at_ns);
    }
    fn measurement_finished(&mut self, at_ns: u64) {
        self.measurement.1 = Some(at_ns);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCounters {
    pub pings_sent: u64,
    pub warmup_pings: u64,
    pub datagrams_sent: u64,
    pub send_failures: u64,
    pub stale_replies: u64,
    /// Cycles passed over because the wakeup itself was more than a period late.
    pub skipped_cycles: u64,
    /// Cycles that expired while a ping was outstanding.
    pub deferred_cycles: u64,
    pub wakeups: u64,
    pub max_wakeup_late_ns: u64,
    pub total_wakeup_late_ns: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ClientRun {
    pub samples: Vec<RttSample>,
    pub counters: ClientCounters,
    pub measurement_start_ns: Option<u64>,
    pub measurement_end_ns: Option<u64>,
}

/// Runs warm-up then the measurement window and returns the measured samples.
pub fn run_client<C, L, O>(cfg: &CycleConfig, clock: &C, link: &mut L, observer: &mut O) -> ClientRun
where
    C: Clock + ?Sized,
    L: PingLink + ?Sized,
    O: ClientObserver + ?Sized,
{
    let period = (cfg.period.as_nanos() as u64).max(1);
    let loss_timeout = cfg.loss_timeout.as_nanos() as u64;
    let deadline_us = cfg.deadline_us();
    let warmup = (cfg.warmup.as_nanos() as u64).div_ceil(period) * period;
    let duration = cfg.duration.as_nanos() as u64;

    let mut run = ClientRun { samples: Vec::with_capacity((duration / period) as usize + 2), ..Default::default() };
    let counters = &mut run.counters;
    let mut msg = Message::with_capacity(PING_TOPIC, cfg.payload_size);

    let grid0 = clock.now_ns();
    let measure_start = grid0 + warmup;
    let measure_end = measure_start + duration;
    let mut k: u64 = 0;
    let mut wire_seq: u64 = 0;
    let mut first_measured: Option<u64> = None;

    loop {
        let mut target = grid0 + k * period;
        if target > measure_end {
            break;
        }
        clock.sleep_until_ns(target);
        let now = clock.now_ns();
        if now.saturating_sub(target) > period {
            let k_now = (now - grid0) / period;
            counters.skipped_cycles += k_now - k;
            observer.on_event(&ClientEvent::Skipped { from_k: k, to_k: k_now });
            k = k_now;
            target = grid0 + k * period;
            if target > measure_end {
                break;
            }
        }
        let late = now.saturating_sub(target);
        counters.wakeups += 1;
        counters.max_wakeup_late_ns = counters.max_wakeup_late_ns.max(late);
        counters.total_wakeup_late_ns += late;
        observer.on_event(&ClientEvent::Wakeup { k, target_ns: target, at_ns: now });

        if first_measured.is_none() && target >= measure_start {
            first_measured = Some(wire_seq);
            run.measurement_start_ns = Some(target);
            observer.measurement_started(target);
        }

        msg.fill_pattern(wire_seq, cfg.payload_size);
        let t1 = clock.now_ns();
        let report = link.send_ping(&msg);
        counters.pings_sent += 1;
        counters.datagrams_sent += report.datagrams as u64;
        counters.send_failures += report.failed as u64;
        observer.on_event(&ClientEvent::Publish { wire_seq, t1_ns: t1 });

        let t2 = link.await_reply(wire_seq, t1 + loss_timeout);
        let resolved = clock.now_ns();
        match t2 {
            Some(t2_ns) => observer.on_event(&ClientEvent::Reply { wire_seq, t2_ns }),
            None => observer.on_event(&ClientEvent::Lost { wire_seq, at_ns: resolved }),
        }

        match first_measured {
            Some(first) => run.samples.push(RttSample::new(wire_seq - first, t1, t2, deadline_us)),
            None => counters.warmup_pings += 1,
        }
        wire_seq += 1;
        let next = resolved.saturating_sub(grid0) / period + 1;
        counters.deferred_cycles += next - (k + 1);
        k = next;
    }

    counters.stale_replies = link.stale_replies();
    let end = clock.now_ns();
    run.measurement_end_ns = Some(end);
    observer.measurement_finished(end);
    run
}
