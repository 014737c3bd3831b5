//! Time sources. Promise times are plain `u64` ticks; what a tick means is
//! up to the clock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

/// A clock that only moves when told to. Used by tests and the harness.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        Self(AtomicU64::new(start))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }

    /// Moves forward by `d` and returns the new time.
    pub fn advance(&self, d: u64) -> u64 {
        self.0.fetch_add(d, Ordering::SeqCst) + d
    }

    /// Moves forward to `t`; never moves backward.
    pub fn advance_to(&self, t: u64) {
        self.0.fetch_max(t, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Ticks elapsed since construction, one tick per `tick`.
#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
    tick: Duration,
}

impl WallClock {
    pub fn new(tick: Duration) -> Self {
        assert!(!tick.is_zero(), "tick must be positive");
        Self {
            origin: Instant::now(),
            tick,
        }
    }
}

impl Clock for WallClock {
    fn now(&self) -> u64 {
        (self.origin.elapsed().as_nanos() / self.tick.as_nanos()) as u64
    }
}
