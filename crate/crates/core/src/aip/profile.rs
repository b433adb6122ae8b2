//! Device profiles merged from three sources, and the registry that decides
//! which devices are in the scheduling pool.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::DeviceId;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentStatus {
    Idle,
    Busy,
    Disconnected,
}

/// Where a field group's value came from. Declared in merge order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileSource {
    UserConfig,
    ServiceManifest,
    ClientTelemetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldGroup {
    System,
    Capabilities,
    Performance,
    Paths,
    Network,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Performance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_cores: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_gb: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gpus: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disk_gb: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<String>,
}

/// A partial profile as supplied by one source. Absent fields leave earlier
/// sources untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFragment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performance: Option<Performance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<Network>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: DeviceId,
    pub status: AgentStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os_version: Option<String>,
    pub capabilities: BTreeSet<String>,
    pub performance: Performance,
    pub paths: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<Network>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_heartbeat: Option<SimTime>,
    /// The source that last wrote each field group.
    pub sources: BTreeMap<FieldGroup, ProfileSource>,
}

impl AgentProfile {
    pub fn new(agent_id: impl Into<DeviceId>) -> Self {
        Self {
            agent_id: agent_id.into(),
            status: AgentStatus::Idle,
            os: None,
            os_version: None,
            capabilities: BTreeSet::new(),
            performance: Performance::default(),
            paths: BTreeMap::new(),
            network: None,
            last_heartbeat: None,
            sources: BTreeMap::new(),
        }
    }

    /// Folds one source into the profile. Scalars are overwritten field by
    /// field; capabilities accumulate, since each source advertises what it
    /// knows about and none can retract another's tools.
    pub fn merge(&mut self, source: ProfileSource, fragment: &ProfileFragment) {
        if fragment.os.is_some() || fragment.os_version.is_some() {
            if let Some(os) = &fragment.os {
                self.os = Some(os.clone());
            }
            if let Some(v) = &fragment.os_version {
                self.os_version = Some(v.clone());
            }
            self.sources.insert(FieldGroup::System, source);
        }
        if let Some(caps) = &fragment.capabilities {
            self.capabilities.extend(caps.iter().cloned());
            self.sources.insert(FieldGroup::Capabilities, source);
        }
        if let Some(p) = &fragment.performance {
            let perf = &mut self.performance;
            perf.cpu_cores = p.cpu_cores.or(perf.cpu_cores);
            perf.memory_gb = p.memory_gb.or(perf.memory_gb);
            perf.disk_gb = p.disk_gb.or(perf.disk_gb);
            if !p.gpus.is_empty() {
                perf.gpus = p.gpus.clone();
            }
            self.sources.insert(FieldGroup::Performance, source);
        }
        if let Some(paths) = &fragment.paths {
            self.paths
                .extend(paths.iter().map(|(k, v)| (k.clone(), v.clone())));
            self.sources.insert(FieldGroup::Paths, source);
        }
        if let Some(n) = &fragment.network {
            let net = self.network.get_or_insert_with(Network::default);
            net.host = n.host.clone().or(net.host.take());
            net.ip = n.ip.clone().or(net.ip.take());
            self.sources.insert(FieldGroup::Network, source);
        }
    }

    /// The three-stage merge: user config, then service manifest, then
    /// client telemetry.
    pub fn merged(
        agent_id: impl Into<DeviceId>,
        user_config: &ProfileFragment,
        manifest: &ProfileFragment,
        telemetry: &ProfileFragment,
    ) -> Self {
        let mut p = Self::new(agent_id);
        p.merge(ProfileSource::UserConfig, user_config);
        p.merge(ProfileSource::ServiceManifest, manifest);
        p.merge(ProfileSource::ClientTelemetry, telemetry);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("agent id must not be empty")]
    EmptyAgentId,
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
}

/// Profiles of every agent ever registered. An agent is in the scheduling
/// pool iff its status is not `DISCONNECTED`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentRegistry {
    profiles: BTreeMap<DeviceId, AgentProfile>,
}

impl AgentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers or refreshes a profile. Re-registering with identical inputs
    /// yields an identical registry.
    pub fn register(
        &mut self,
        profile: AgentProfile,
        now: SimTime,
    ) -> Result<&AgentProfile, RegistryError> {
        if profile.agent_id.as_str().trim().is_empty() {
            return Err(RegistryError::EmptyAgentId);
        }
        let last = self
            .profiles
            .get(&profile.agent_id)
            .and_then(|p| p.last_heartbeat);
        let mut profile = profile;
        profile.status = AgentStatus::Idle;
        profile.last_heartbeat = Some(last.map_or(now, |l| l.max(now)));
        let id = profile.agent_id.clone();
        self.profiles.insert(id.clone(), profile);
        Ok(&self.profiles[&id])
    }

    pub fn get(&self, id: &str) -> Option<&AgentProfile> {
        self.profiles.get(id)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &AgentProfile> {
        self.profiles.values()
    }

    /// Records liveness; the stored timestamp never moves backwards.
    pub fn record_heartbeat(&mut self, id: &str, now: SimTime) -> Result<(), RegistryError> {
        let p = self
            .profiles
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownAgent(id.to_owned()))?;
        p.last_heartbeat = Some(p.last_heartbeat.map_or(now, |l| l.max(now)));
        Ok(())
    }

    /// Returns whether the status actually changed.
    pub fn set_status(&mut self, id: &str, status: AgentStatus) -> Result<bool, RegistryError> {
        let p = self
            .profiles
            .get_mut(id)
            .ok_or_else(|| RegistryError::UnknownAgent(id.to_owned()))?;
        let changed = p.status != status;
        p.status = status;
        Ok(changed)
    }

    pub fn pool(&self) -> BTreeSet<DeviceId> {
        self.profiles
            .values()
            .filter(|p| p.status != AgentStatus::Disconnected)
            .map(|p| p.agent_id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpu_sources() -> (ProfileFragment, ProfileFragment, ProfileFragment) {
        let user = ProfileFragment {
            capabilities: Some(vec!["data_processing".into(), "model_training".into()]),
            paths: Some(BTreeMap::from([("workspace".into(), "/data".into())])),
            ..Default::default()
        };
        let manifest = ProfileFragment {
            os: Some("linux".into()),
            capabilities: Some(vec!["cli".into(), "file_system".into()]),
            ..Default::default()
        };
        let telemetry = ProfileFragment {
            os_version: Some("Ubuntu 22.04".into()),
            performance: Some(Performance {
                cpu_cores: Some(96),
                memory_gb: Some(866.1),
                gpus: vec!["NVIDIA A100 80G".into(); 4],
                disk_gb: None,
            }),
            ..Default::default()
        };
        (user, manifest, telemetry)
    }

    #[test]
    fn three_stage_merge_builds_the_gpu_card() {
        let (u, m, t) = gpu_sources();
        let p = AgentProfile::merged("gpu_agent", &u, &m, &t);
        assert_eq!(p.performance.cpu_cores, Some(96));
        assert_eq!(p.performance.memory_gb, Some(866.1));
        assert_eq!(p.performance.gpus.len(), 4);
        assert_eq!(
            p.capabilities
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>(),
            ["cli", "data_processing", "file_system", "model_training"]
        );
        assert_eq!(
            p.sources[&FieldGroup::Performance],
            ProfileSource::ClientTelemetry
        );
        assert_eq!(
            p.sources[&FieldGroup::Capabilities],
            ProfileSource::ServiceManifest
        );
        assert_eq!(p.sources[&FieldGroup::Paths], ProfileSource::UserConfig);
        assert_eq!(
            p.sources[&FieldGroup::System],
            ProfileSource::ClientTelemetry
        );
    }

    #[test]
    fn later_sources_win_on_overlap() {
        let a = ProfileFragment {
            os: Some("windows".into()),
            ..Default::default()
        };
        let b = ProfileFragment {
            os: Some("linux".into()),
            ..Default::default()
        };
        let p = AgentProfile::merged("x", &a, &b, &ProfileFragment::default());
        assert_eq!(p.os.as_deref(), Some("linux"));
        assert_eq!(
            p.sources[&FieldGroup::System],
            ProfileSource::ServiceManifest
        );
    }

    #[test]
    fn duplicate_register_is_idempotent() {
        let (u, m, t) = gpu_sources();
        let mut r = AgentRegistry::new();
        r.register(
            AgentProfile::merged("g", &u, &m, &t),
            SimTime::from_secs(1.0),
        )
        .unwrap();
        let once = r.clone();
        r.register(
            AgentProfile::merged("g", &u, &m, &t),
            SimTime::from_secs(1.0),
        )
        .unwrap();
        assert_eq!(r, once);
    }

    #[test]
    fn empty_id_rejected_and_heartbeat_monotone() {
        let mut r = AgentRegistry::new();
        assert_eq!(
            r.register(AgentProfile::new(""), SimTime::ZERO)
                .unwrap_err(),
            RegistryError::EmptyAgentId
        );
        r.register(AgentProfile::new("d"), SimTime::ZERO).unwrap();
        r.record_heartbeat("d", SimTime::from_secs(10.0)).unwrap();
        r.record_heartbeat("d", SimTime::from_secs(4.0)).unwrap();
        assert_eq!(
            r.get("d").unwrap().last_heartbeat,
            Some(SimTime::from_secs(10.0))
        );
    }

    #[test]
    fn disconnected_agents_leave_the_pool() {
        let mut r = AgentRegistry::new();
        r.register(AgentProfile::new("a"), SimTime::ZERO).unwrap();
        r.register(AgentProfile::new("b"), SimTime::ZERO).unwrap();
        assert!(r.set_status("a", AgentStatus::Disconnected).unwrap());
        assert_eq!(
            r.pool().into_iter().collect::<Vec<_>>(),
            [DeviceId::new("b")]
        );
    }
}
