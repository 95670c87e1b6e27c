//! Round-trip latency benchmarking for best-effort publish/subscribe over UDP.

pub mod bench;
pub mod loadgen;
pub mod metrics;
pub mod pubsub;
pub mod rtconfig;
pub mod runner;
pub mod wire;
