//! Transports the client publishes pings through.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::clock::{Clock, MonotonicClock};
use super::{PING_TOPIC, PONG_TOPIC};
use crate::pubsub::{
    Endpoint, PubSubError, Publisher, PublisherOptions, QosProfile, SendReport, Subscriber, SubscriberOptions,
    SubscriberStats,
};
use crate::wire::Message;

/// One ping in flight at a time: `send_ping` arms the reply slot for the
/// message's seq, `await_reply` resolves it.
pub trait PingLink {
    fn send_ping(&mut self, msg: &Message) -> SendReport;
    /// Waits for the reply to `seq` until the clock reads `until_ns`.
    /// Returns the reply timestamp, or `None` after retiring the ping.
    fn await_reply(&mut self, seq: u64, until_ns: u64) -> Option<u64>;
    fn stale_replies(&self) -> u64;
}

#[derive(Debug, Default)]
struct MailboxState {
    armed: Option<u64>,
    reply_t2: Option<u64>,
    stale: u64,
}

/// Reply slot shared by the cycle thread and the subscriber callback thread.
#[derive(Debug, Default)]
pub struct Mailbox {
    state: Mutex<MailboxState>,
    cv: Condvar,
}

impl Mailbox {
    pub fn arm(&self, seq: u64) {
        let mut st = self.state.lock().expect("mailbox poisoned");
        st.armed = Some(seq);
        st.reply_t2 = None;
    }

    /// Called from the reply callback with the callback-entry timestamp.
    pub fn deliver(&self, seq: u64, t2_ns: u64) {
        let mut st = self.state.lock().expect("mailbox poisoned");
        if st.armed == Some(seq) && st.reply_t2.is_none() {
            st.reply_t2 = Some(t2_ns);
            drop(st);
            self.cv.notify_one();
        } else {
            st.stale += 1;
        }
    }

    /// Blocks until a reply lands or `until_ns` passes on `clock`. A reply
    /// stamped after `until_ns` counts as stale. Disarms in every case.
    pub fn wait<C: Clock + ?Sized>(&self, clock: &C, until_ns: u64) -> Option<u64> {
        let mut st = self.state.lock().expect("mailbox poisoned");
        loop {
            if let Some(t2) = st.reply_t2.take() {
                st.armed = None;
                if t2 <= until_ns {
                    return Some(t2);
                }
                st.stale += 1;
                return None;
            }
            let now = clock.now_ns();
            if now >= until_ns {
                st.armed = None;
                return None;
            }
            let (g, _) = self.cv.wait_timeout(st, Duration::from_nanos(until_ns - now)).expect("mailbox poisoned");
            st = g;
        }
    }

    pub fn stale(&self) -> u64 {
        self.state.lock().expect("mailbox poisoned").stale
    }
}

#[derive(Debug, Clone, Default)]
pub struct LinkOptions {
    pub publisher: PublisherOptions,
    pub subscriber: SubscriberOptions,
}

/// Pings over the pub/sub transport: publishes on the ping topic and
/// receives echoes on the pong topic.
#[derive(Debug)]
pub struct PubSubLink {
    publisher: Publisher,
    subscriber: Subscriber,
    mailbox: Arc<Mailbox>,
}

impl PubSubLink {
    pub fn connect(
        ping_remote: Endpoint,
        pong_local: Endpoint,
        qos: QosProfile,
        opts: LinkOptions,
    ) -> Result<Self, PubSubError> {
        let mailbox = Arc::new(Mailbox::default());
        let mb = Arc::clone(&mailbox);
        let clock = MonotonicClock;
        let subscriber = Subscriber::with_options(PONG_TOPIC, pong_local, qos, opts.subscriber, move |m: &Message| {
            let t2 = clock.now_ns();
            mb.deliver(m.seq, t2);
        })?;
        let publisher = Publisher::with_options(PING_TOPIC, ping_remote, qos, opts.publisher)?;
        Ok(Self { publisher, subscriber, mailbox })
    }

    pub fn subscriber_stats(&self) -> SubscriberStats {
        self.subscriber.stats()
    }

    pub fn close(self) -> SubscriberStats {
        self.subscriber.shutdown()
    }
}

impl PingLink for PubSubLink {
    fn send_ping(&mut self, msg: &Message) -> SendReport {
        self.mailbox.arm(msg.seq);
        match self.publisher.publish(msg) {
            Ok(r) => r,
            Err(_) => SendReport { datagrams: 0, bytes: 0, failed: 1 },
        }
    }

    fn await_reply(&mut self, _seq: u64, until_ns: u64) -> Option<u64> {
        self.mailbox.wait(&MonotonicClock, until_ns)
    }

    fn stale_replies(&self) -> u64 {
        self.mailbox.stale()
    }
}

/// In-process lossless transport: every ping is answered after a fixed
/// delay on the given clock.
#[derive(Debug, Clone)]
pub struct LoopbackStub<C> {
    clock: C,
    reply_delay_ns: u64,
    armed: Option<u64>,
}

impl<C: Clock> LoopbackStub<C> {
    pub fn new(clock: C, reply_delay: Duration) -> Self {
        Self { clock, reply_delay_ns: reply_delay.as_nanos() as u64, armed: None }
    }
}

impl<C: Clock> PingLink for LoopbackStub<C> {
    fn send_ping(&mut self, msg: &Message) -> SendReport {
        self.armed = Some(self.clock.now_ns());
        SendReport { datagrams: 1, bytes: msg.payload.len(), failed: 0 }
    }

    fn await_reply(&mut self, _seq: u64, until_ns: u64) -> Option<u64> {
        let sent = self.armed.take()?;
        let at = sent + self.reply_delay_ns;
        if at > until_ns {
            self.clock.sleep_until_ns(until_ns);
            return None;
        }
        self.clock.sleep_until_ns(at);
        Some(self.clock.now_ns())
    }

    fn stale_replies(&self) -> u64 {
        0
    }
}
