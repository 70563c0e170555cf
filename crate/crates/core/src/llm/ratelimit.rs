//! Sliding-window request limiter with an injectable clock.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manual clock for tests: `sleep` advances time instantly.
#[derive(Debug, Default, Clone)]
pub struct FakeClock {
    now: Arc<Mutex<Duration>>,
}

impl FakeClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().expect("clock lock") += d;
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock lock")
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

const WINDOW: Duration = Duration::from_secs(60);

/// Admits at most `per_minute` requests in any 60-second window.
pub struct RateLimiter {
    per_minute: usize,
    granted: Mutex<VecDeque<Duration>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for RateLimiter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateLimiter").field("per_minute", &self.per_minute).finish()
    }
}

impl RateLimiter {
    pub fn new(per_minute: usize, clock: Arc<dyn Clock>) -> Self {
        Self { per_minute: per_minute.max(1), granted: Mutex::new(VecDeque::new()), clock }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Blocks until a request may be sent and returns the grant time.
    pub fn acquire(&self) -> Duration {
        loop {
            let wait = {
                let mut granted = self.granted.lock().expect("limiter lock");
                let now = self.clock.now();
                while granted.front().is_some_and(|&t| t + WINDOW <= now) {
                    granted.pop_front();
                }
                if granted.len() < self.per_minute {
                    granted.push_back(now);
                    return now;
                }
                granted[0] + WINDOW - now
            };
            self.clock.sleep(wait);
        }
    }
}
