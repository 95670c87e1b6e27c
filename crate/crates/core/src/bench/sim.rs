//! Deterministic transport for driving the client on a [`SimClock`].

use super::clock::{Clock, SimClock};
use super::link::PingLink;
use crate::pubsub::SendReport;
use crate::wire::Message;

/// Replies after a scripted delay per ping. Entry `i` of the script is the
/// reply delay in nanoseconds for wire seq `i`; `None` (or running past the
/// end of the script) means the server never answers.
#[derive(Debug, Clone)]
pub struct ScriptedLink {
    clock: SimClock,
    script: Vec<Option<u64>>,
    fallback: Option<u64>,
    armed: Option<(u64, u64)>,
    stale: u64,
}

impl ScriptedLink {
    pub fn new(clock: SimClock, script: Vec<Option<u64>>) -> Self {
        Self { clock, script, fallback: None, armed: None, stale: 0 }
    }

    /// Same delay for every ping.
    pub fn constant(clock: SimClock, delay_ns: Option<u64>) -> Self {
        Self { clock, script: Vec::new(), fallback: delay_ns, armed: None, stale: 0 }
    }

    fn delay_for(&self, seq: u64) -> Option<u64> {
        match self.script.get(seq as usize) {
            Some(d) => *d,
            None => self.fallback,
        }
    }
}

impl PingLink for ScriptedLink {
    fn send_ping(&mut self, msg: &Message) -> SendReport {
        self.armed = Some((msg.seq, self.clock.now_ns()));
        SendReport { datagrams: 1, bytes: msg.payload.len(), failed: 0 }
    }

    fn await_reply(&mut self, seq: u64, until_ns: u64) -> Option<u64> {
        let (armed_seq, t1) = self.armed.take()?;
        debug_assert_eq!(armed_seq, seq);
        match self.delay_for(seq) {
            Some(d) if t1 + d <= until_ns => {
                self.clock.advance_to(t1 + d);
                Some(t1 + d)
            }
            Some(_) => {
                // Arrives after retirement.
                self.stale += 1;
                self.clock.advance_to(until_ns);
                None
            }
            None => {
                self.clock.advance_to(until_ns);
                None
            }
        }
    }

    fn stale_replies(&self) -> u64 {
        self.stale
    }
}
