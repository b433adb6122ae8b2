//! A deterministic networked world: for every device, a constellation-side
//! endpoint, a device agent server and a device client, joined by links.
//! Every frame is encoded, carried over a [`Link`] and decoded on arrival,
//! and all of it runs on one virtual clock. Given the same spec and seed,
//! two runs produce identical wire logs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::clock::VirtualClock;
use super::network::{Link, LinkError, LinkSpec, Way};
use crate::agent::client::{ClientOutput, ClientTimer, DeviceClient};
use crate::agent::executor::{ExecError, ExecutorScript, ScriptedExecutor};
use crate::agent::pipeline::PipelineConfig;
use crate::agent::reasoner::{ReasonerError, ReasonerScript, ScriptedReasoner};
use crate::agent::server::{DeviceAgentServer, ServerOutput, ServerPeer, ServerTimer};
use crate::aip::endpoint::{
    AttemptRecord, ConstellationEndpoint, EndpointEvent, EndpointOutput, EndpointPhase,
    EndpointTimer, HeartbeatConfig,
};
use crate::aip::message::{decode, encode, AipMessage, TaskEndBody, TaskEndStatus, TaskRequest};
use crate::aip::profile::{AgentProfile, AgentRegistry, AgentStatus, ProfileFragment};
use crate::aip::resilience::BackoffPolicy;
use crate::aip::session::{WireLog, WireRecord};
use crate::constellation::{DeviceId, FailureReason, TaskId, TaskStatus};
use crate::orchestrator::{
    Availability, DispatchError, DispatchRequest, Dispatcher, Progress, TaskOutcome,
};
use crate::time::SimTime;

/// The one connection id every endpoint uses towards its server.
const CONN: &str = "constellation";
const CLIENT_ID: &str = "constellation";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("device `{0}` declared twice")]
    DuplicateDevice(String),
    #[error("device `{0}`: {1}")]
    Link(String, LinkError),
    #[error("device `{0}`: {1}")]
    Executor(String, ExecError),
    #[error("device `{0}`: {1}")]
    Reasoner(String, ReasonerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: DeviceId,
    #[serde(default)]
    pub user_config: ProfileFragment,
    #[serde(default)]
    pub manifest: ProfileFragment,
    #[serde(default)]
    pub telemetry: ProfileFragment,
    #[serde(default)]
    pub executor: ExecutorScript,
    #[serde(default)]
    pub reasoner: ReasonerScript,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// The link between the constellation and this device's server.
    #[serde(default = "default_link")]
    pub link: LinkSpec,
}

fn default_link() -> LinkSpec {
    LinkSpec {
        latency_ms: super::network::Latency::FixedMs(5.0),
        outages: vec![],
    }
}

impl DeviceSpec {
    /// A device with lenient scripts: every task finishes at once.
    pub fn plain(id: impl Into<DeviceId>) -> Self {
        Self {
            id: id.into(),
            user_config: ProfileFragment::default(),
            manifest: ProfileFragment::default(),
            telemetry: ProfileFragment::default(),
            executor: ExecutorScript::default(),
            reasoner: ReasonerScript::default(),
            pipeline: PipelineConfig::default(),
            link: default_link(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    #[serde(default)]
    pub backoff: BackoffPolicy,
}

impl WorldSpec {
    pub fn plain<I, S>(devices: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<DeviceId>,
    {
        Self {
            devices: devices.into_iter().map(DeviceSpec::plain).collect(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dest {
    /// The device server, receiving from the constellation.
    Server,
    Endpoint,
    /// The device server, receiving from its client.
    ServerFromClient,
    Client,
}

#[derive(Debug)]
enum Ev {
    Deliver {
        dev: usize,
        dest: Dest,
        frame: Vec<u8>,
    },
    Endpoint {
        dev: usize,
        timer: EndpointTimer,
    },
    Server {
        dev: usize,
        timer: ServerTimer,
    },
    Client {
        dev: usize,
        timer: ClientTimer,
    },
}

struct Node {
    id: DeviceId,
    endpoint: ConstellationEndpoint,
    server: DeviceAgentServer,
    client: DeviceClient,
    remote: Link,
    local: Link,
    /// Tasks handed to this device whose outcome the orchestrator awaits.
    in_flight: BTreeSet<TaskId>,
}

/// Per-device summary after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub phase: EndpointPhase,
    pub disconnections: Vec<SimTime>,
    pub attempts: Vec<AttemptRecord>,
    pub commands_executed: usize,
    pub aborted_tasks: Vec<String>,
}

pub struct SimWorld {
    clock: VirtualClock<Ev>,
    nodes: Vec<Node>,
    index: BTreeMap<DeviceId, usize>,
    registry: AgentRegistry,
    wire: WireLog,
    outcomes: Vec<TaskOutcome>,
    availability_changed: bool,
    undecodable: usize,
}

/// Independent stream per component from one run seed.
fn sub_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl SimWorld {
    pub fn new(spec: WorldSpec, seed: u64) -> Result<Self, WorldError> {
        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        for (i, d) in spec.devices.into_iter().enumerate() {
            let name = d.id.to_string();
            if index.insert(d.id.clone(), i).is_some() {
                return Err(WorldError::DuplicateDevice(name));
            }
            let executor = ScriptedExecutor::new(d.executor)
                .map_err(|e| WorldError::Executor(name.clone(), e))?;
            let reasoner = ScriptedReasoner::new(d.reasoner)
                .map_err(|e| WorldError::Reasoner(name.clone(), e))?;
            let remote = Link::new(
                format!("constellation<->{name}"),
                d.link,
                sub_seed(seed, 2 * i as u64),
            )
            .map_err(|e| WorldError::Link(name.clone(), e))?;
            nodes.push(Node {
                endpoint: ConstellationEndpoint::new(
                    CLIENT_ID,
                    name.clone(),
                    d.user_config,
                    spec.heartbeat,
                    spec.backoff,
                    sub_seed(seed, 2 * i as u64 + 1),
                ),
                server: DeviceAgentServer::new(
                    name.clone(),
                    Box::new(reasoner),
                    d.pipeline,
                    spec.heartbeat.interval(),
                    spec.heartbeat.missed_limit,
                ),
                client: DeviceClient::new(
                    name.clone(),
                    d.manifest,
                    d.telemetry,
                    Box::new(executor),
                ),
                remote,
                local: Link::local(format!("{name}-server<->{name}-client")),
                in_flight: BTreeSet::new(),
                id: d.id,
            });
        }
        Ok(Self {
            clock: VirtualClock::new(SimTime::ZERO),
            nodes,
            index,
            registry: AgentRegistry::new(),
            wire: WireLog::default(),
            outcomes: Vec::new(),
            availability_changed: false,
            undecodable: 0,
        })
    }

    /// Brings every device up: clients register with their servers and
    /// endpoints connect and fetch profiles. Returns once each endpoint is
    /// available or lost.
    pub fn boot(&mut self) -> SimTime {
        for dev in 0..self.nodes.len() {
            let out = self.nodes[dev].client.boot();
            self.apply_client(dev, out);
            let out = self.nodes[dev].endpoint.start();
            self.apply_endpoint(dev, out);
        }
        while self.nodes.iter().any(|n| n.endpoint.is_settling()) {
            let Some(t) = self.clock.peek_time() else {
                break;
            };
            self.fire_all(t);
        }
        self.availability_changed = false;
        self.clock.now()
    }

    pub fn wire_log(&self) -> &WireLog {
        &self.wire
    }

    pub fn registry(&self) -> &AgentRegistry {
        &self.registry
    }

    /// Frames that failed to decode on arrival. Always zero unless the codec
    /// is broken.
    pub fn undecodable_frames(&self) -> usize {
        self.undecodable
    }

    pub fn device_reports(&self) -> BTreeMap<DeviceId, DeviceReport> {
        self.nodes
            .iter()
            .map(|n| {
                (
                    n.id.clone(),
                    DeviceReport {
                        phase: n.endpoint.phase(),
                        disconnections: n.endpoint.disconnections().to_vec(),
                        attempts: n.endpoint.attempts().to_vec(),
                        commands_executed: n.client.executed(),
                        aborted_tasks: n.server.aborted_tasks().to_vec(),
                    },
                )
            })
            .collect()
    }

    fn is_idle(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.in_flight.is_empty() && !n.endpoint.is_settling())
    }

    fn fire_all(&mut self, t: SimTime) {
        while let Some((_, ev)) = self.clock.pop_until(t) {
            self.fire(ev);
        }
    }

    fn fire(&mut self, ev: Ev) {
        let now = self.clock.now();
        match ev {
            Ev::Deliver { dev, dest, frame } => {
                let msg = match decode(&frame) {
                    Ok(m) => m,
                    Err(e) => {
                        tracing::error!(device = %self.nodes[dev].id, %e, "undecodable frame dropped");
                        self.undecodable += 1;
                        return;
                    }
                };
                let node = &mut self.nodes[dev];
                match dest {
                    Dest::Server => {
                        let out = node.server.handle_from_constellation(now, CONN, msg);
                        self.apply_server(dev, out);
                    }
                    Dest::ServerFromClient => {
                        let out = node.server.handle_from_client(now, msg);
                        self.apply_server(dev, out);
                    }
                    Dest::Endpoint => {
                        let out = node.endpoint.handle(now, msg);
                        self.apply_endpoint(dev, out);
                    }
                    Dest::Client => {
                        let out = node.client.handle(now, msg);
                        self.apply_client(dev, out);
                    }
                }
            }
            Ev::Endpoint { dev, timer } => {
                let out = self.nodes[dev].endpoint.on_timer(now, timer);
                self.apply_endpoint(dev, out);
            }
            Ev::Server { dev, timer } => {
                let out = self.nodes[dev].server.on_timer(now, timer);
                self.apply_server(dev, out);
            }
            Ev::Client { dev, timer } => {
                let out = self.nodes[dev].client.on_timer(now, timer);
                self.apply_client(dev, out);
            }
        }
    }

    fn send(&mut self, dev: usize, dest: Dest, msg: AipMessage) {
        let now = self.clock.now();
        let node = &mut self.nodes[dev];
        let (link, way) = match dest {
            Dest::Server => (&mut node.remote, Way::Forward),
            Dest::Endpoint => (&mut node.remote, Way::Back),
            Dest::Client => (&mut node.local, Way::Forward),
            Dest::ServerFromClient => (&mut node.local, Way::Back),
        };
        let at = link.transmit(now, way);
        self.wire.push(WireRecord::new(link.name(), &msg, now, at));
        if let Some(at) = at {
            self.clock.schedule_at(
                at,
                Ev::Deliver {
                    dev,
                    dest,
                    frame: encode(&msg),
                },
            );
        }
    }

    fn apply_client(&mut self, dev: usize, outputs: Vec<ClientOutput>) {
        for o in outputs {
            match o {
                ClientOutput::Send(msg) => self.send(dev, Dest::ServerFromClient, msg),
                ClientOutput::Timer { at, timer } => {
                    self.clock.schedule_at(at, Ev::Client { dev, timer });
                }
            }
        }
    }

    fn apply_server(&mut self, dev: usize, outputs: Vec<ServerOutput>) {
        for o in outputs {
            match o {
                ServerOutput::Send {
                    to: ServerPeer::DeviceClient,
                    msg,
                } => self.send(dev, Dest::Client, msg),
                ServerOutput::Send {
                    to: ServerPeer::Constellation(_),
                    msg,
                } => self.send(dev, Dest::Endpoint, msg),
                ServerOutput::Timer { at, timer } => {
                    self.clock.schedule_at(at, Ev::Server { dev, timer });
                }
                ServerOutput::AbortBatch { response_id } => {
                    let now = self.clock.now();
                    let out = self.nodes[dev].client.abort(now, &response_id);
                    self.apply_client(dev, out);
                }
                ServerOutput::SessionFaulted { session_id, .. } => {
                    self.wire.mark_faulted(&session_id)
                }
            }
        }
    }

    fn apply_endpoint(&mut self, dev: usize, outputs: Vec<EndpointOutput>) {
        let now = self.clock.now();
        for o in outputs {
            match o {
                EndpointOutput::Send(msg) => self.send(dev, Dest::Server, msg),
                EndpointOutput::Timer { at, timer } => {
                    self.clock.schedule_at(at, Ev::Endpoint { dev, timer });
                }
                EndpointOutput::TryConnect { .. } => {
                    let up = self.nodes[dev].remote.is_up(now);
                    let out = self.nodes[dev].endpoint.connect_result(now, up);
                    self.apply_endpoint(dev, out);
                }
                EndpointOutput::Event(e) => self.on_endpoint_event(dev, e),
            }
        }
    }

    fn on_endpoint_event(&mut self, dev: usize, event: EndpointEvent) {
        let now = self.clock.now();
        let node = &mut self.nodes[dev];
        match event {
            EndpointEvent::Available(profile) => {
                let _ = self.registry.register(profile, now);
                self.availability_changed = true;
            }
            EndpointEvent::Disconnected { session_id, tasks } => {
                if let Some(s) = &session_id {
                    self.wire.mark_faulted(s);
                }
                for t in tasks {
                    if node.in_flight.remove(t.as_str()) {
                        self.outcomes.push(TaskOutcome {
                            task_id: t.into(),
                            status: TaskStatus::Failed,
                            result: Some(json!({
                                "failure_reason": FailureReason::AgentDisconnected.as_str(),
                                "error": "connection to the device was lost",
                            })),
                            failure_reason: Some(FailureReason::AgentDisconnected),
                            at: now,
                        });
                    }
                }
                let _ = self
                    .registry
                    .set_status(node.id.as_str(), AgentStatus::Disconnected);
                self.availability_changed = true;
            }
            EndpointEvent::Lost => self.availability_changed = true,
            EndpointEvent::TaskEnded { task_id, end } => {
                if node.in_flight.remove(task_id.as_str()) {
                    self.outcomes.push(outcome_of(task_id.into(), end, now));
                    let _ = self
                        .registry
                        .set_status(node.id.as_str(), AgentStatus::Idle);
                }
            }
            EndpointEvent::Reconnected { attempt } => {
                tracing::info!(device = %node.id, attempt, "reconnected");
            }
        }
    }

    fn drain(&mut self, idle: bool) -> Progress {
        let mut outcomes = std::mem::take(&mut self.outcomes);
        outcomes.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        Progress {
            now: self.clock.now(),
            outcomes,
            availability_changed: std::mem::take(&mut self.availability_changed),
            idle,
        }
    }
}

fn outcome_of(task_id: TaskId, end: TaskEndBody, at: SimTime) -> TaskOutcome {
    let (status, failure_reason) = match end.status {
        TaskEndStatus::Completed => (TaskStatus::Completed, None),
        TaskEndStatus::Failed => {
            let reason = end
                .result
                .as_ref()
                .and_then(|r| r.get("failure_reason"))
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or(FailureReason::ExecutionError);
            (TaskStatus::Failed, Some(reason))
        }
    };
    TaskOutcome {
        task_id,
        status,
        result: end.result,
        failure_reason,
        at,
    }
}

impl Dispatcher for SimWorld {
    fn now(&self) -> SimTime {
        self.clock.now()
    }

    fn availability(&self, device: &DeviceId) -> Availability {
        let Some(&i) = self.index.get(device) else {
            return Availability::Lost;
        };
        let n = &self.nodes[i];
        match n.endpoint.phase() {
            EndpointPhase::Lost => Availability::Lost,
            EndpointPhase::Available if n.in_flight.is_empty() => Availability::Available,
            _ => Availability::Unavailable,
        }
    }

    fn profiles(&self) -> Vec<AgentProfile> {
        self.registry.profiles().cloned().collect()
    }

    fn dispatch(&mut self, request: DispatchRequest) -> Result<(), DispatchError> {
        let device = request.task.device.clone();
        let Some(&dev) = self.index.get(&device) else {
            return Err(DispatchError::PeerDisconnected(device));
        };
        let task_id = request.task.id.clone();
        let wire = TaskRequest {
            task_id: task_id.to_string(),
            name: request.task.name.clone(),
            description: request.task.description.clone(),
            tips: request.task.tips.clone(),
            inputs: request.inputs.iter().map(|i| i.to_value()).collect(),
        };
        let out = self.nodes[dev]
            .endpoint
            .dispatch(wire)
            .map_err(|_| DispatchError::PeerDisconnected(device.clone()))?;
        self.nodes[dev].in_flight.insert(task_id);
        let _ = self.registry.set_status(device.as_str(), AgentStatus::Busy);
        self.apply_endpoint(dev, out);
        Ok(())
    }

    fn cancel(&mut self, task: &TaskId) {
        for n in &mut self.nodes {
            if n.in_flight.remove(task) {
                n.endpoint.cancel(task.as_str());
            }
        }
    }

    fn advance(&mut self, until: Option<SimTime>) -> Progress {
        loop {
            if !self.outcomes.is_empty() || self.availability_changed {
                return self.drain(self.is_idle());
            }
            let idle = self.is_idle();
            if idle && until.is_none() {
                return self.drain(true);
            }
            let next = self.clock.peek_time();
            match (next, until) {
                (Some(n), Some(u)) if n > u => {
                    self.clock.advance_to(u);
                    return self.drain(idle);
                }
                (None, Some(u)) => {
                    self.clock.advance_to(u);
                    return self.drain(idle);
                }
                (None, None) => return self.drain(idle),
                (Some(n), _) => self.fire_all(n),
            }
        }
    }
}
