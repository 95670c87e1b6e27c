//! Echo server: every ping is republished unchanged on the pong topic.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{PING_TOPIC, PONG_TOPIC};
use crate::pubsub::{Endpoint, PubSubError, Publisher, PublisherOptions, QosProfile, Subscriber, SubscriberOptions};
use crate::wire::Message;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Where pings are received.
    pub ping_local: Endpoint,
    /// Where pongs are sent.
    pub pong_remote: Endpoint,
    pub qos: QosProfile,
    pub publisher: PublisherOptions,
    pub subscriber: SubscriberOptions,
}

impl ServerConfig {
    pub fn new(ping_local: Endpoint, pong_remote: Endpoint, qos: QosProfile) -> Self {
        Self {
            ping_local,
            pong_remote,
            qos,
            publisher: PublisherOptions::default(),
            subscriber: SubscriberOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub received: u64,
    pub echoed: u64,
    pub send_failures: u64,
    pub malformed: u64,
    pub incomplete: u64,
    pub overwritten: u64,
}

#[derive(Debug, Default)]
struct EchoCounters {
    echoed: AtomicU64,
    send_failures: AtomicU64,
}

#[derive(Debug)]
pub struct ServerHandle {
    subscriber: Subscriber,
    counters: Arc<EchoCounters>,
}

pub fn start_server(cfg: &ServerConfig) -> Result<ServerHandle, PubSubError> {
    let mut publisher = Publisher::with_options(PONG_TOPIC, cfg.pong_remote, cfg.qos, cfg.publisher)?;
    let counters = Arc::new(EchoCounters::default());
    let c = Arc::clone(&counters);
    let mut echo = Message::with_capacity(PONG_TOPIC, cfg.subscriber.payload_capacity);
    let subscriber = Subscriber::with_options(
        PING_TOPIC,
        cfg.ping_local,
        cfg.qos,
        cfg.subscriber.clone(),
        move |ping: &Message| {
            echo.copy_from(ping);
            echo.topic_id = PONG_TOPIC;
            match publisher.publish(&echo) {
                Ok(r) if r.failed == 0 => {
                    c.echoed.fetch_add(1, Ordering::Relaxed);
                }
                _ => {
                    c.send_failures.fetch_add(1, Ordering::Relaxed);
                }
            }
        },
    )?;
    Ok(ServerHandle { subscriber, counters })
}

impl ServerHandle {
    pub fn stats(&self) -> ServerStats {
        let s = self.subscriber.stats();
        ServerStats {
            received: s.delivered,
            echoed: self.counters.echoed.load(Ordering::Relaxed),
            send_failures: self.counters.send_failures.load(Ordering::Relaxed),
            malformed: s.malformed,
            incomplete: s.incomplete,
            overwritten: s.overwritten,
        }
    }

    pub fn stop(self) -> ServerStats {
        let counters = self.counters;
        let s = self.subscriber.shutdown();
        ServerStats {
            received: s.delivered,
            echoed: counters.echoed.load(Ordering::Relaxed),
            send_failures: counters.send_failures.load(Ordering::Relaxed),
            malformed: s.malformed,
            incomplete: s.incomplete,
            overwritten: s.overwritten,
        }
    }
}

/// Serves until `stop` is set.
pub fn run_server(cfg: &ServerConfig, stop: &AtomicBool) -> Result<ServerStats, PubSubError> {
    let handle = start_server(cfg)?;
    while !stop.load(Ordering::Relaxed) {
        thread::sleep(Duration::from_millis(20));
    }
    Ok(handle.stop())
}
