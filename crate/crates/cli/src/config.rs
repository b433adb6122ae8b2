//! Optional TOML settings. Every field may be omitted; omitted fields keep
//! the engine's and the world's own defaults.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use constellation_core::aip::{BackoffPolicy, HeartbeatConfig};
use constellation_core::orchestrator::EngineConfig;
use constellation_core::sim::WorldSpec;
use constellation_core::time::SimDuration;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub log_level: Option<String>,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub heartbeat: HeartbeatSection,
    #[serde(default)]
    pub backoff: BackoffSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub exec_timeout_s: Option<f64>,
    pub max_rejections: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatSection {
    pub interval_s: Option<f64>,
    pub missed_limit: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackoffSection {
    pub base_s: Option<f64>,
    pub multiplier: Option<f64>,
    pub max_s: Option<f64>,
    pub max_attempts: Option<u32>,
    pub jitter: Option<f64>,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn engine(&self) -> EngineConfig {
        let mut c = EngineConfig::default();
        if let Some(t) = self.engine.exec_timeout_s {
            c.exec_timeout = SimDuration::from_secs(t);
        }
        if let Some(r) = self.engine.max_rejections {
            c.max_rejections = r;
        }
        c
    }

    /// Applies the timer overrides on top of whatever `world` declares.
    pub fn apply_to_world(&self, world: &mut WorldSpec) {
        let h = &self.heartbeat;
        let HeartbeatConfig {
            interval_s,
            missed_limit,
        } = &mut world.heartbeat;
        set(interval_s, h.interval_s);
        set(missed_limit, h.missed_limit);
        let b = &self.backoff;
        let BackoffPolicy {
            base_s,
            multiplier,
            max_s,
            max_attempts,
            jitter,
        } = &mut world.backoff;
        set(base_s, b.base_s);
        set(multiplier, b.multiplier);
        set(max_s, b.max_s);
        set(max_attempts, b.max_attempts);
        set(jitter, b.jitter);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_overrides_only_what_it_names() {
        let c: CliConfig = toml::from_str(
            "log_level = \"debug\"\n[engine]\nmax_rejections = 3\n[backoff]\njitter = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.engine().max_rejections, 3);
        assert_eq!(
            c.engine().exec_timeout,
            EngineConfig::default().exec_timeout
        );
        let mut w = WorldSpec::default();
        c.apply_to_world(&mut w);
        assert_eq!(w.backoff.jitter, 0.0);
        assert_eq!(w.backoff.base_s, BackoffPolicy::default().base_s);
        assert_eq!(w.heartbeat, HeartbeatConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CliConfig>("[engine]\nretries = 2\n").is_err());
    }
}
