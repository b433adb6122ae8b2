//! Timer arithmetic for liveness detection and reconnection. Both types are
//! pure: callers feed them the virtual time and act on what they return.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::time::{SimDuration, SimTime};

/// Exponential backoff. The n-th delay (from 0) is
/// `min(base * multiplier^n, max) * (1 + u)` with `u` uniform in
/// `[-jitter, jitter]`. Each delay is measured from the previous attempt, so
/// attempt k fires at the sum of the first k delays after the drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackoffPolicy {
    pub base_s: f64,
    pub multiplier: f64,
    pub max_s: f64,
    pub max_attempts: u32,
    pub jitter: f64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self {
            base_s: 1.0,
            multiplier: 2.0,
            max_s: 30.0,
            max_attempts: 5,
            jitter: 0.1,
        }
    }
}

impl BackoffPolicy {
    pub fn nominal_delay(&self, n: u32) -> SimDuration {
        let d = (self.base_s * self.multiplier.powi(n as i32)).min(self.max_s);
        SimDuration::from_secs(d.max(0.0))
    }

    pub fn delay<R: Rng + ?Sized>(&self, n: u32, rng: &mut R) -> SimDuration {
        let u = if self.jitter > 0.0 {
            rng.random_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        self.nominal_delay(n).mul_f64(1.0 + u)
    }

    /// Absolute times of every attempt for a drop noticed at `start`.
    pub fn schedule<R: Rng + ?Sized>(&self, start: SimTime, rng: &mut R) -> Vec<SimTime> {
        let mut t = start;
        (0..self.max_attempts)
            .map(|n| {
                t += self.delay(n, rng);
                t
            })
            .collect()
    }

    /// Upper bound on the time from drop to giving up.
    pub fn exhaustion_bound(&self) -> SimDuration {
        (0..self.max_attempts)
            .map(|n| self.nominal_delay(n))
            .sum::<SimDuration>()
            .mul_f64(1.0 + self.jitter)
    }
}

/// Deadline-based liveness monitor: a peer is declared dead once nothing has
/// been heard from it for `missed_limit` heartbeat intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatMonitor {
    pub interval: SimDuration,
    pub missed_limit: u32,
    last_seen: SimTime,
}

impl HeartbeatMonitor {
    pub fn new(interval: SimDuration, missed_limit: u32, now: SimTime) -> Self {
        Self {
            interval,
            missed_limit,
            last_seen: now,
        }
    }

    /// Never moves `last_seen` backwards.
    pub fn observe(&mut self, now: SimTime) {
        self.last_seen = self.last_seen.max(now);
    }

    pub fn last_seen(&self) -> SimTime {
        self.last_seen
    }

    pub fn deadline(&self) -> SimTime {
        self.last_seen
            + SimDuration::from_micros(self.interval.as_micros() * self.missed_limit as u64)
    }

    pub fn is_expired(&self, now: SimTime) -> bool {
        now >= self.deadline()
    }
}
