//! Monotonic time sources. All timestamps are nanoseconds on one clock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub trait Clock {
    fn now_ns(&self) -> u64;
    /// Blocks until the clock reads at least `t_ns`. Returns at once if
    /// that time has passed.
    fn sleep_until_ns(&self, t_ns: u64);
}

/// `CLOCK_MONOTONIC`, with absolute-time sleeps so a periodic schedule
/// never accumulates drift.
#[derive(Debug, Clone, Copy, Default)]
pub struct MonotonicClock;

fn to_timespec(t_ns: u64) -> libc::timespec {
    libc::timespec { tv_sec: (t_ns / 1_000_000_000) as libc::time_t, tv_nsec: (t_ns % 1_000_000_000) as libc::c_long }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
        // SAFETY: ts is a valid out-pointer.
        unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
        ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
    }

    fn sleep_until_ns(&self, t_ns: u64) {
        let ts = to_timespec(t_ns);
        loop {
            // SAFETY: ts is valid; the remainder pointer may be null for TIMER_ABSTIME.
            let rc =
                unsafe { libc::clock_nanosleep(libc::CLOCK_MONOTONIC, libc::TIMER_ABSTIME, &ts, std::ptr::null_mut()) };
            if rc != libc::EINTR {
                break;
            }
        }
    }
}

/// Manually driven clock. Sleeping jumps time forward instead of blocking.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    now: Arc<AtomicU64>,
}

impl SimClock {
    pub fn new(start_ns: u64) -> Self {
        Self { now: Arc::new(AtomicU64::new(start_ns)) }
    }

    /// Moves time forward to `t_ns`; never moves it back.
    pub fn advance_to(&self, t_ns: u64) {
        self.now.fetch_max(t_ns, Ordering::SeqCst);
    }

    pub fn advance_by(&self, d_ns: u64) {
        self.now.fetch_add(d_ns, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_until_ns(&self, t_ns: u64) {
        self.advance_to(t_ns);
    }
}
