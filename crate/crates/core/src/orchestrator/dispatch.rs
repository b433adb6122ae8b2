//! The boundary between the orchestrator and the world that runs tasks.
//!
//! A dispatcher owns the clock. The orchestrator hands it tasks, asks it to
//! let time pass, and gets back terminal outcomes and availability changes.
//! [`ScriptedDispatcher`] is a protocol-free world with per-task outcome
//! tables and device downtime windows; the simulated network in
//! [`crate::sim`] implements the same trait over the full agent protocol.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::aip::profile::AgentProfile;
use crate::constellation::{DeviceId, FailureReason, TaskId, TaskStar, TaskStatus};
use crate::sim::clock::VirtualClock;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Availability {
    Available,
    /// Temporarily out of the pool: disconnected, reconnecting or busy.
    Unavailable,
    /// Gone for good, or never known.
    Lost,
}

/// A finished upstream task as seen by its consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamInput {
    pub task_id: TaskId,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<FailureReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

impl UpstreamInput {
    pub fn to_value(&self) -> Value {
        json!(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRequest {
    pub task: TaskStar,
    pub inputs: Vec<UpstreamInput>,
    pub dispatched_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("device `{0}` is not connected")]
    PeerDisconnected(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: TaskId,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<FailureReason>,
    pub at: SimTime,
}

/// What one call to [`Dispatcher::advance`] produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    pub now: SimTime,
    /// Outcomes of dispatched tasks, sorted by task id.
    pub outcomes: Vec<TaskOutcome>,
    pub availability_changed: bool,
    /// Nothing is running and no device is mid-transition: without new
    /// dispatches, time would pass with no effect.
    pub idle: bool,
}

pub trait Dispatcher {
    fn now(&self) -> SimTime;
    fn availability(&self, device: &DeviceId) -> Availability;
    fn profiles(&self) -> Vec<AgentProfile>;
    fn dispatch(&mut self, request: DispatchRequest) -> Result<(), DispatchError>;
    /// Forgets a task; any later outcome for it is discarded.
    fn cancel(&mut self, task: &TaskId);
    /// Lets time pass until something happens or `until` is reached. Every
    /// event at the stopping instant is processed before returning.
    fn advance(&mut self, until: Option<SimTime>) -> Progress;
}

/// Canned behaviour of one task in a [`ScriptedDispatcher`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedOutcome {
    pub duration_s: f64,
    #[serde(default = "completed")]
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

fn completed() -> TaskStatus {
    TaskStatus::Completed
}

impl ScriptedOutcome {
    pub fn ok(duration_s: f64) -> Self {
        Self {
            duration_s,
            status: TaskStatus::Completed,
            result: None,
        }
    }

    pub fn failed(duration_s: f64) -> Self {
        Self {
            duration_s,
            status: TaskStatus::Failed,
            result: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tick {
    Finish,
    Availability,
}

#[derive(Debug, Clone)]
struct Running {
    device: DeviceId,
    finish_at: SimTime,
}

/// Protocol-free world: each device runs one task at a time, a task's
/// outcome comes from a table (default: complete after `default_duration`),
/// and a device that goes down mid-task fails it as disconnected.
#[derive(Debug)]
pub struct ScriptedDispatcher {
    clock: VirtualClock<Tick>,
    devices: BTreeMap<DeviceId, Vec<(SimTime, Option<SimTime>)>>,
    outcomes: BTreeMap<TaskId, ScriptedOutcome>,
    default_duration: SimDuration,
    running: BTreeMap<TaskId, Running>,
    dispatched: Vec<(TaskId, DeviceId, SimTime)>,
    inputs_seen: BTreeMap<TaskId, Vec<UpstreamInput>>,
}

impl ScriptedDispatcher {
    pub fn new<I, S>(devices: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            clock: VirtualClock::new(SimTime::ZERO),
            devices: devices
                .into_iter()
                .map(|d| (DeviceId::new(d), Vec::new()))
                .collect(),
            outcomes: BTreeMap::new(),
            default_duration: SimDuration::from_secs(1.0),
            running: BTreeMap::new(),
            dispatched: Vec::new(),
            inputs_seen: BTreeMap::new(),
        }
    }

    pub fn with_default_duration(mut self, d: SimDuration) -> Self {
        self.default_duration = d;
        self
    }

    pub fn with_outcome(mut self, task: impl Into<String>, outcome: ScriptedOutcome) -> Self {
        self.outcomes.insert(TaskId::new(task), outcome);
        self
    }

    /// Takes `device` down over `[from, until)`; `None` means forever.
    pub fn with_downtime(mut self, device: &str, from: SimTime, until: Option<SimTime>) -> Self {
        self.devices
            .entry(DeviceId::new(device))
            .or_default()
            .push((from, until));
        self.clock.schedule_at(from, Tick::Availability);
        if let Some(u) = until {
            self.clock.schedule_at(u, Tick::Availability);
        }
        self
    }

    /// Every dispatch so far: task, device, time.
    pub fn dispatched(&self) -> &[(TaskId, DeviceId, SimTime)] {
        &self.dispatched
    }

    pub fn inputs_seen(&self, task: &str) -> Option<&[UpstreamInput]> {
        self.inputs_seen.get(task).map(Vec::as_slice)
    }

    fn down_at(&self, device: &DeviceId, t: SimTime) -> Option<bool> {
        let windows = self.devices.get(device)?;
        Some(
            windows
                .iter()
                .any(|(from, until)| *from <= t && until.is_none_or(|u| t < u)),
        )
    }

    fn permanently_down(&self, device: &DeviceId, t: SimTime) -> bool {
        self.devices
            .get(device)
            .is_some_and(|w| w.iter().any(|(from, until)| *from <= t && until.is_none()))
    }

    fn busy(&self) -> BTreeSet<&DeviceId> {
        self.running.values().map(|r| &r.device).collect()
    }
}

impl Dispatcher for ScriptedDispatcher {
    fn now(&self) -> SimTime {
        self.clock.now()
    }

    fn availability(&self, device: &DeviceId) -> Availability {
        let now = self.clock.now();
        match self.down_at(device, now) {
            None => Availability::Lost,
            Some(true) if self.permanently_down(device, now) => Availability::Lost,
            Some(true) => Availability::Unavailable,
            Some(false) if self.busy().contains(device) => Availability::Unavailable,
            Some(false) => Availability::Available,
        }
    }

    fn profiles(&self) -> Vec<AgentProfile> {
        self.devices
            .keys()
            .map(|d| AgentProfile::new(d.as_str()))
            .collect()
    }

    fn dispatch(&mut self, request: DispatchRequest) -> Result<(), DispatchError> {
        let device = request.task.device.clone();
        if self.availability(&device) != Availability::Available {
            return Err(DispatchError::PeerDisconnected(device));
        }
        let id = request.task.id.clone();
        let duration = self
            .outcomes
            .get(&id)
            .map(|o| SimDuration::from_secs(o.duration_s))
            .unwrap_or(self.default_duration);
        let finish_at = self.clock.now() + duration;
        self.clock.schedule_at(finish_at, Tick::Finish);
        self.dispatched
            .push((id.clone(), device.clone(), self.clock.now()));
        self.inputs_seen.insert(id.clone(), request.inputs);
        self.running.insert(id, Running { device, finish_at });
        Ok(())
    }

    fn cancel(&mut self, task: &TaskId) {
        self.running.remove(task);
    }

    fn advance(&mut self, until: Option<SimTime>) -> Progress {
        loop {
            let idle = self.running.is_empty();
            let next = self.clock.peek_time();
            let stop = match (next, until) {
                (None, None) => {
                    return Progress {
                        now: self.clock.now(),
                        idle,
                        ..Default::default()
                    }
                }
                (Some(n), Some(u)) if n > u => None,
                (None, Some(_)) => None,
                (Some(n), _) => Some(n),
            };
            let Some(t) = stop else {
                self.clock.advance_to(until.expect("bounded"));
                return Progress {
                    now: self.clock.now(),
                    idle,
                    ..Default::default()
                };
            };
            let mut progress = Progress {
                now: t,
                ..Default::default()
            };
            while let Some((_, tick)) = self.clock.pop_until(t) {
                if tick == Tick::Availability {
                    progress.availability_changed = true;
                }
            }
            let ids: Vec<TaskId> = self.running.keys().cloned().collect();
            for id in ids {
                let r = &self.running[&id];
                let down = self.down_at(&r.device, t).unwrap_or(true);
                let (status, result, reason) = if down {
                    (
                        TaskStatus::Failed,
                        None,
                        Some(FailureReason::AgentDisconnected),
                    )
                } else if r.finish_at <= t {
                    let o = self.outcomes.get(&id);
                    let status = o.map(|o| o.status).unwrap_or(TaskStatus::Completed);
                    let reason =
                        (status == TaskStatus::Failed).then_some(FailureReason::ExecutionError);
                    (status, o.and_then(|o| o.result.clone()), reason)
                } else {
                    continue;
                };
                self.running.remove(&id);
                progress.outcomes.push(TaskOutcome {
                    task_id: id,
                    status,
                    result,
                    failure_reason: reason,
                    at: t,
                });
            }
            if !progress.outcomes.is_empty() || progress.availability_changed {
                progress.idle = self.running.is_empty();
                return progress;
            }
        }
    }
}
