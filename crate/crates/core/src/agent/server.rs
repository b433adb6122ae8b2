use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::pipeline::{failure_end, PipelineConfig, PipelineStep, TaskPipeline};
use super::reasoner::Reasoner;
use crate::aip::message::{
    AipMessage, CommandBody, DeviceInfoResponseBody, Direction, MessageBody, TaskEndBody,
};
use crate::aip::profile::ProfileFragment;
use crate::aip::resilience::HeartbeatMonitor;
use crate::aip::session::{Acceptance, SessionState};
use crate::constellation::FailureReason;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ServerPeer {
    /// A constellation client, by its connection id.
    Constellation(String),
    DeviceClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerTimer {
    CheckSession { session_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerOutput {
    Send {
        to: ServerPeer,
        msg: AipMessage,
    },
    Timer {
        at: SimTime,
        timer: ServerTimer,
    },
    /// Tell the device client to cancel this command batch.
    AbortBatch {
        response_id: String,
    },
    /// The session was torn down because its client went silent.
    SessionFaulted {
        session_id: String,
        aborted_tasks: Vec<String>,
    },
}

struct ConstellationSession {
    conn: String,
    state: SessionState,
    monitor: HeartbeatMonitor,
}

struct ServerTask {
    session_id: String,
    pipeline: TaskPipeline,
}

/// The controlling half of a device agent. It owns every task's pipeline,
/// decides all state transitions and talks to exactly one device client.
pub struct DeviceAgentServer {
    device_id: String,
    reasoner: Box<dyn Reasoner>,
    pipeline_config: PipelineConfig,
    heartbeat_interval: SimDuration,
    missed_limit: u32,
    client: Option<(SessionState, ProfileFragment, ProfileFragment)>,
    sessions: BTreeMap<String, ConstellationSession>,
    tasks: BTreeMap<(String, String), ServerTask>,
    routes: BTreeMap<String, (String, String)>,
    next_session: u64,
    next_batch: u64,
    aborted: Vec<String>,
}

impl DeviceAgentServer {
    pub fn new(
        device_id: impl Into<String>,
        reasoner: Box<dyn Reasoner>,
        pipeline_config: PipelineConfig,
        heartbeat_interval: SimDuration,
        missed_limit: u32,
    ) -> Self {
        Self {
            device_id: device_id.into(),
            reasoner,
            pipeline_config,
            heartbeat_interval,
            missed_limit,
            client: None,
            sessions: BTreeMap::new(),
            tasks: BTreeMap::new(),
            routes: BTreeMap::new(),
            next_session: 0,
            next_batch: 0,
            aborted: Vec::new(),
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    /// Task ids aborted because their constellation session died.
    pub fn aborted_tasks(&self) -> &[String] {
        &self.aborted
    }

    pub fn active_tasks(&self) -> Vec<String> {
        self.tasks.keys().map(|(_, t)| t.clone()).collect()
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions
            .values()
            .filter(|s| s.state.phase != crate::aip::session::SessionPhase::Closed)
            .count()
    }

    pub fn handle_from_client(&mut self, now: SimTime, msg: AipMessage) -> Vec<ServerOutput> {
        if let MessageBody::Register(reg) = &msg.body {
            if reg.client_id != self.device_id {
                return vec![send_client(AipMessage::error(
                    "client id does not match this device",
                    json!({"client_id": reg.client_id}),
                    Direction::ServerToClient,
                ))];
            }
            let fragment = |key: &str| -> ProfileFragment {
                reg.metadata
                    .get(key)
                    .cloned()
                    .and_then(|v| serde_json::from_value(v).ok())
                    .unwrap_or_default()
            };
            let (manifest, telemetry) = (fragment("manifest"), fragment("telemetry"));
            let mut session =
                SessionState::new(format!("{}-local", self.device_id), &reg.client_id);
            let _ = session.accept(&msg);
            let ack = session.stamp(AipMessage::heartbeat_ok(now, Direction::ServerToClient));
            self.client = Some((session, manifest, telemetry));
            return vec![send_client(ack)];
        }
        let Some((session, _, _)) = &mut self.client else {
            return vec![];
        };
        if session.accept(&msg) != Ok(Acceptance::Fresh) {
            return vec![];
        }
        let MessageBody::CommandResults(body) = msg.body else {
            return vec![];
        };
        let Some(key) = self.routes.remove(&body.prev_response_id) else {
            return vec![];
        };
        let Some(task) = self.tasks.get_mut(&key) else {
            return vec![];
        };
        let step = task
            .pipeline
            .resume(self.reasoner.as_mut(), body.action_results);
        self.on_step(now, key, step)
    }

    pub fn handle_from_constellation(
        &mut self,
        now: SimTime,
        conn: &str,
        msg: AipMessage,
    ) -> Vec<ServerOutput> {
        if let MessageBody::Register(reg) = &msg.body {
            let mut out = Vec::new();
            // A fresh registration supersedes any session left on this connection.
            let stale: Vec<String> = self
                .sessions
                .iter()
                .filter(|(_, s)| {
                    s.conn == conn && s.state.phase != crate::aip::session::SessionPhase::Closed
                })
                .map(|(id, _)| id.clone())
                .collect();
            for sid in stale {
                out.extend(self.fault_session(&sid));
            }
            if reg.client_id.trim().is_empty() {
                out.push(ServerOutput::Send {
                    to: ServerPeer::Constellation(conn.to_owned()),
                    msg: AipMessage::error(
                        "empty client id",
                        Value::Null,
                        Direction::ServerToClient,
                    ),
                });
                return out;
            }
            self.next_session += 1;
            let sid = format!("{}-s{}", self.device_id, self.next_session);
            let mut state = SessionState::new(sid.clone(), &reg.client_id);
            let _ = state.accept(&msg);
            let ack = state.stamp(AipMessage::heartbeat_ok(now, Direction::ServerToClient));
            let monitor = HeartbeatMonitor::new(self.heartbeat_interval, self.missed_limit, now);
            out.push(ServerOutput::Timer {
                at: monitor.deadline(),
                timer: ServerTimer::CheckSession {
                    session_id: sid.clone(),
                },
            });
            self.sessions.insert(
                sid,
                ConstellationSession {
                    conn: conn.to_owned(),
                    state,
                    monitor,
                },
            );
            out.push(ServerOutput::Send {
                to: ServerPeer::Constellation(conn.to_owned()),
                msg: ack,
            });
            return out;
        }
        let Some(sid) = msg.session_id.clone() else {
            return vec![];
        };
        let Some(session) = self.sessions.get_mut(&sid) else {
            return vec![];
        };
        let acceptance = match session.state.accept(&msg) {
            Ok(a) => a,
            Err(e) => {
                tracing::debug!(device = %self.device_id, %e, "server ignored message");
                return vec![];
            }
        };
        session.monitor.observe(now);
        let to = ServerPeer::Constellation(session.conn.clone());
        match (acceptance, msg.body) {
            (Acceptance::Duplicate, _) => vec![],
            (Acceptance::ActiveTask, _) => {
                let ack = session
                    .state
                    .stamp(AipMessage::heartbeat_ok(now, Direction::ServerToClient));
                vec![ServerOutput::Send { to, msg: ack }]
            }
            (_, MessageBody::Heartbeat(hb)) if hb.status.is_none() => {
                let ack = session
                    .state
                    .stamp(AipMessage::heartbeat_ok(now, Direction::ServerToClient));
                vec![ServerOutput::Send { to, msg: ack }]
            }
            (_, MessageBody::DeviceInfoRequest(req)) => {
                let (manifest, telemetry) = match &self.client {
                    Some((_, m, t)) => (json!(m), json!(t)),
                    None => (Value::Null, Value::Null),
                };
                let resp = AipMessage::new(MessageBody::DeviceInfoResponse(
                    DeviceInfoResponseBody {
                        result: json!({"device_id": self.device_id, "manifest": manifest, "telemetry": telemetry}),
                        response_id: req.request_id,
                    },
                ));
                let resp = session.state.stamp(resp);
                vec![ServerOutput::Send { to, msg: resp }]
            }
            (_, MessageBody::Task(body)) => {
                let key = (sid.clone(), body.request.task_id.clone());
                if self.client.is_none() {
                    let end = failure_end(
                        FailureReason::AgentDisconnected,
                        "device client unavailable",
                    );
                    return self.end_task(&sid, end);
                }
                let mut pipeline = TaskPipeline::new(body.request, self.pipeline_config.clone());
                let step = pipeline.start(self.reasoner.as_mut());
                self.tasks.insert(
                    key.clone(),
                    ServerTask {
                        session_id: sid,
                        pipeline,
                    },
                );
                self.on_step(now, key, step)
            }
            _ => vec![],
        }
    }

    fn on_step(
        &mut self,
        _now: SimTime,
        key: (String, String),
        step: PipelineStep,
    ) -> Vec<ServerOutput> {
        match step {
            PipelineStep::Issue(actions) => {
                self.next_batch += 1;
                let response_id = format!("{}-b{}", self.device_id, self.next_batch);
                self.routes.insert(response_id.clone(), key);
                let (session, _, _) = self
                    .client
                    .as_mut()
                    .expect("tasks start only with a client");
                let msg = session.stamp(AipMessage::new(MessageBody::Command(CommandBody {
                    actions,
                    response_id,
                })));
                vec![send_client(msg)]
            }
            PipelineStep::Done(end) => {
                let task = self.tasks.remove(&key).expect("stepping task exists");
                self.end_task(&task.session_id, end)
            }
        }
    }

    fn end_task(&mut self, session_id: &str, end: TaskEndBody) -> Vec<ServerOutput> {
        let Some(session) = self.sessions.get_mut(session_id) else {
            return vec![];
        };
        let msg = session
            .state
            .stamp(AipMessage::new(MessageBody::TaskEnd(end)));
        vec![ServerOutput::Send {
            to: ServerPeer::Constellation(session.conn.clone()),
            msg,
        }]
    }

    pub fn on_timer(&mut self, now: SimTime, timer: ServerTimer) -> Vec<ServerOutput> {
        let ServerTimer::CheckSession { session_id } = timer;
        let Some(session) = self.sessions.get(&session_id) else {
            return vec![];
        };
        if session.state.phase == crate::aip::session::SessionPhase::Closed {
            return vec![];
        }
        if session.monitor.is_expired(now) {
            return self.fault_session(&session_id);
        }
        vec![ServerOutput::Timer {
            at: session.monitor.deadline(),
            timer: ServerTimer::CheckSession { session_id },
        }]
    }

    /// Closes a session and aborts every task it carried.
    fn fault_session(&mut self, session_id: &str) -> Vec<ServerOutput> {
        let Some(session) = self.sessions.get_mut(session_id) else {
            return vec![];
        };
        session.state.close();
        let keys: Vec<_> = self
            .tasks
            .keys()
            .filter(|(s, _)| s == session_id)
            .cloned()
            .collect();
        let mut out = Vec::new();
        let mut aborted = Vec::new();
        for key in keys {
            self.tasks.remove(&key);
            let batches: Vec<String> = self
                .routes
                .iter()
                .filter(|(_, k)| **k == key)
                .map(|(r, _)| r.clone())
                .collect();
            for r in batches {
                self.routes.remove(&r);
                out.push(ServerOutput::AbortBatch { response_id: r });
            }
            aborted.push(key.1.clone());
            self.aborted.push(key.1);
        }
        out.push(ServerOutput::SessionFaulted {
            session_id: session_id.to_owned(),
            aborted_tasks: aborted,
        });
        out
    }
}

fn send_client(msg: AipMessage) -> ServerOutput {
    ServerOutput::Send {
        to: ServerPeer::DeviceClient,
        msg,
    }
}
