//! Point-to-point links with seeded latency and scheduled outages.
//!
//! An outage `[down, up)` is half-open; `up = None` means the link never
//! comes back. A frame is dropped when any outage overlaps the closed window
//! from its send instant to its delivery instant, so a frame is lost if the
//! link is down when it leaves, when it lands, or at any point between.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("latency range {0}..{1} ms is empty or negative")]
    BadLatency(f64, f64),
    #[error("outage starting at {0}s is empty or overlaps the one before it")]
    BadOutage(f64),
}

/// One-way latency, either fixed or drawn uniformly per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Latency {
    FixedMs(f64),
    RangeMs([f64; 2]),
}

impl Default for Latency {
    fn default() -> Self {
        Latency::FixedMs(0.0)
    }
}

/// `[down_s, up_s)`, with `up_s = null` for a permanent failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outage(pub f64, pub Option<f64>);

impl Outage {
    fn down(&self) -> SimTime {
        SimTime::from_secs(self.0)
    }

    fn up(&self) -> Option<SimTime> {
        self.1.map(SimTime::from_secs)
    }

    fn covers(&self, t: SimTime) -> bool {
        self.down() <= t && self.up().is_none_or(|u| t < u)
    }

    /// Overlap with the closed window `[from, to]`.
    fn overlaps(&self, from: SimTime, to: SimTime) -> bool {
        self.down() <= to && self.up().is_none_or(|u| from < u)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    #[serde(default)]
    pub latency_ms: Latency,
    #[serde(default)]
    pub outages: Vec<Outage>,
}

impl LinkSpec {
    pub fn validate(&self) -> Result<(), LinkError> {
        match self.latency_ms {
            Latency::FixedMs(ms) if ms < 0.0 || !ms.is_finite() => {
                return Err(LinkError::BadLatency(ms, ms))
            }
            Latency::RangeMs([lo, hi]) if lo < 0.0 || hi < lo || !hi.is_finite() => {
                return Err(LinkError::BadLatency(lo, hi))
            }
            _ => {}
        }
        let mut floor = f64::NEG_INFINITY;
        for (i, o) in self.outages.iter().enumerate() {
            let empty = o.1.is_some_and(|u| u <= o.0);
            let permanent_before = i > 0 && self.outages[i - 1].1.is_none();
            if o.0 < floor || empty || permanent_before || o.0 < 0.0 {
                return Err(LinkError::BadOutage(o.0));
            }
            floor = o.1.unwrap_or(f64::INFINITY);
        }
        Ok(())
    }
}

/// A bidirectional link. Each direction keeps its own delivery floor so a
/// short draw never overtakes an earlier long one: frames stay in order.
#[derive(Debug, Clone)]
pub struct Link {
    name: String,
    spec: LinkSpec,
    rng: ChaCha8Rng,
    last_delivery: [SimTime; 2],
}

/// Which way a frame travels on a [`Link`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Way {
    Forward = 0,
    Back = 1,
}

impl Link {
    pub fn new(name: impl Into<String>, spec: LinkSpec, seed: u64) -> Result<Self, LinkError> {
        spec.validate()?;
        Ok(Self {
            name: name.into(),
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_delivery: [SimTime::ZERO; 2],
        })
    }

    pub fn local(name: impl Into<String>) -> Self {
        Self::new(name, LinkSpec::default(), 0).expect("default spec is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_up(&self, t: SimTime) -> bool {
        !self.spec.outages.iter().any(|o| o.covers(t))
    }

    fn sample(&mut self) -> SimDuration {
        let ms = match self.spec.latency_ms {
            Latency::FixedMs(ms) => ms,
            Latency::RangeMs([lo, hi]) if hi > lo => self.rng.random_range(lo..=hi),
            Latency::RangeMs([lo, _]) => lo,
        };
        SimDuration::from_secs(ms / 1000.0)
    }

    /// Delivery instant for a frame sent at `now`, or `None` if it is lost.
    pub fn transmit(&mut self, now: SimTime, way: Way) -> Option<SimTime> {
        let at = (now + self.sample()).max(self.last_delivery[way as usize]);
        if self.spec.outages.iter().any(|o| o.overlaps(now, at)) {
            return None;
        }
        self.last_delivery[way as usize] = at;
        Some(at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs(s)
    }

    #[test]
    fn outage_is_half_open_and_covers_flight_time() {
        let spec = LinkSpec {
            latency_ms: Latency::FixedMs(5.0),
            outages: vec![Outage(10.0, Some(20.0))],
        };
        let mut l = Link::new("l", spec, 0).unwrap();
        assert!(l.is_up(t(9.999)));
        assert!(!l.is_up(t(10.0)));
        assert!(l.is_up(t(20.0)));
        assert_eq!(l.transmit(t(1.0), Way::Forward), Some(t(1.005)));
        // Leaves before the outage but lands inside it.
        assert_eq!(l.transmit(t(9.998), Way::Forward), None);
        assert_eq!(l.transmit(t(15.0), Way::Back), None);
        assert_eq!(l.transmit(t(20.0), Way::Back), Some(t(20.005)));
    }

    #[test]
    fn permanent_outage_never_ends() {
        let spec = LinkSpec {
            latency_ms: Latency::FixedMs(1.0),
            outages: vec![Outage(5.0, None)],
        };
        let mut l = Link::new("l", spec, 0).unwrap();
        assert!(!l.is_up(t(1e6)));
        assert_eq!(l.transmit(t(1e6), Way::Forward), None);
    }

    #[test]
    fn random_latency_is_seeded_and_never_reorders() {
        let spec = LinkSpec {
            latency_ms: Latency::RangeMs([50.0, 100.0]),
            outages: vec![],
        };
        let run = |seed| {
            let mut l = Link::new("w", spec.clone(), seed).unwrap();
            (0..50)
                .map(|i| l.transmit(t(i as f64 * 0.01), Way::Forward).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.iter().enumerate().all(|(i, d)| {
            let lag = d.since(t(i as f64 * 0.01)).as_secs();
            (0.05..=0.1 + 1e-9).contains(&lag) || i > 0
        }));
    }

    #[test]
    fn overlapping_or_empty_outages_are_rejected() {
        let bad = |outages| LinkSpec {
            latency_ms: Latency::FixedMs(1.0),
            outages,
        };
        assert!(bad(vec![Outage(5.0, Some(5.0))]).validate().is_err());
        assert!(bad(vec![Outage(5.0, Some(9.0)), Outage(8.0, Some(12.0))])
            .validate()
            .is_err());
        assert!(bad(vec![Outage(5.0, None), Outage(8.0, Some(12.0))])
            .validate()
            .is_err());
        assert!(bad(vec![Outage(5.0, Some(9.0)), Outage(9.0, None)])
            .validate()
            .is_ok());
    }
}
