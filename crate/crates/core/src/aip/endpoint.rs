//! The constellation client's connection to one device agent server, as a
//! sans-IO node. The world feeds it frames, timer firings and connection
//! results; it answers with frames to send, timers to arm, connection
//! attempts and events for the orchestrator.
//!
//! Lifecycle: connect, `REGISTER`, wait for the `HEARTBEAT(OK)` ack, fetch
//! the device profile with `DEVICE_INFO_REQUEST`, then serve tasks while
//! exchanging heartbeats. Silence for `missed_limit` intervals drops the
//! session, fails every task in flight and starts backoff reconnection.
//! Exhausting the attempts leaves the device lost for good.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::message::{
    AipMessage, DeviceInfoRequestBody, Direction, MessageBody, TaskBody, TaskEndBody, TaskRequest,
};
use super::profile::{AgentProfile, ProfileFragment};
use super::resilience::{BackoffPolicy, HeartbeatMonitor};
use super::session::{Acceptance, SessionState};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EndpointPhase {
    Idle,
    Connecting,
    Registering,
    Profiling,
    Available,
    Reconnecting,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointTimer {
    Heartbeat { epoch: u64 },
    Liveness { epoch: u64 },
    Reconnect { attempt: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EndpointEvent {
    Available(AgentProfile),
    /// The session died; `tasks` were in flight and are now failed.
    Disconnected {
        session_id: Option<String>,
        tasks: Vec<String>,
    },
    Lost,
    TaskEnded {
        task_id: String,
        end: TaskEndBody,
    },
    Reconnected {
        attempt: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EndpointOutput {
    Send(AipMessage),
    Timer {
        at: SimTime,
        timer: EndpointTimer,
    },
    /// Ask the world to open the transport; answer with
    /// [`ConstellationEndpoint::connect_result`].
    TryConnect {
        attempt: Option<u32>,
    },
    Event(EndpointEvent),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndpointError {
    #[error("device `{0}` is not connected")]
    PeerDisconnected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatConfig {
    pub interval_s: f64,
    pub missed_limit: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            interval_s: 5.0,
            missed_limit: 3,
        }
    }
}

impl HeartbeatConfig {
    pub fn interval(&self) -> SimDuration {
        SimDuration::from_secs(self.interval_s)
    }
}

/// Record of one reconnection attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub at: SimTime,
    pub succeeded: bool,
}

pub struct ConstellationEndpoint {
    client_id: String,
    device_id: String,
    user_config: ProfileFragment,
    heartbeat: HeartbeatConfig,
    policy: BackoffPolicy,
    rng: ChaCha8Rng,
    phase: EndpointPhase,
    epoch: u64,
    session: Option<SessionState>,
    monitor: HeartbeatMonitor,
    attempt: u32,
    pending_attempt: Option<u32>,
    next_request: u64,
    in_flight: VecDeque<(String, bool)>,
    profile: Option<AgentProfile>,
    attempts: Vec<AttemptRecord>,
    disconnected_at: Vec<SimTime>,
}

impl ConstellationEndpoint {
    pub fn new(
        client_id: impl Into<String>,
        device_id: impl Into<String>,
        user_config: ProfileFragment,
        heartbeat: HeartbeatConfig,
        policy: BackoffPolicy,
        seed: u64,
    ) -> Self {
        Self {
            client_id: client_id.into(),
            device_id: device_id.into(),
            user_config,
            heartbeat,
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            phase: EndpointPhase::Idle,
            epoch: 0,
            session: None,
            monitor: HeartbeatMonitor::new(
                heartbeat.interval(),
                heartbeat.missed_limit,
                SimTime::ZERO,
            ),
            attempt: 0,
            pending_attempt: None,
            next_request: 0,
            in_flight: VecDeque::new(),
            profile: None,
            attempts: Vec::new(),
            disconnected_at: Vec::new(),
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn phase(&self) -> EndpointPhase {
        self.phase
    }

    pub fn profile(&self) -> Option<&AgentProfile> {
        self.profile.as_ref()
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session.as_ref().map(|s| s.session_id.as_str())
    }

    pub fn attempts(&self) -> &[AttemptRecord] {
        &self.attempts
    }

    /// Times at which the liveness monitor declared the server gone.
    pub fn disconnections(&self) -> &[SimTime] {
        &self.disconnected_at
    }

    /// Live (not cancelled) tasks awaiting a `TASK_END`.
    pub fn tasks_in_flight(&self) -> Vec<String> {
        self.in_flight
            .iter()
            .filter(|(_, cancelled)| !cancelled)
            .map(|(t, _)| t.clone())
            .collect()
    }

    /// Whether a connection attempt or handshake is in progress.
    pub fn is_settling(&self) -> bool {
        matches!(
            self.phase,
            EndpointPhase::Connecting
                | EndpointPhase::Registering
                | EndpointPhase::Profiling
                | EndpointPhase::Reconnecting
        )
    }

    pub fn start(&mut self) -> Vec<EndpointOutput> {
        self.phase = EndpointPhase::Connecting;
        self.pending_attempt = None;
        vec![EndpointOutput::TryConnect { attempt: None }]
    }

    pub fn connect_result(&mut self, now: SimTime, ok: bool) -> Vec<EndpointOutput> {
        let attempt = self.pending_attempt.take();
        if let Some(a) = attempt {
            self.attempts.push(AttemptRecord {
                attempt: a,
                at: now,
                succeeded: ok,
            });
        }
        if !ok {
            return match attempt {
                None => self.begin_reconnect(now),
                Some(a) => self.next_attempt(now, a + 1),
            };
        }
        self.epoch += 1;
        self.phase = EndpointPhase::Registering;
        self.session = None;
        self.monitor =
            HeartbeatMonitor::new(self.heartbeat.interval(), self.heartbeat.missed_limit, now);
        let mut out = vec![
            EndpointOutput::Send(AipMessage::register(
                &self.client_id,
                json!({"role": "constellation_client", "target": self.device_id}),
            )),
            EndpointOutput::Timer {
                at: now + self.heartbeat.interval(),
                timer: EndpointTimer::Heartbeat { epoch: self.epoch },
            },
            EndpointOutput::Timer {
                at: self.monitor.deadline(),
                timer: EndpointTimer::Liveness { epoch: self.epoch },
            },
        ];
        if let Some(a) = attempt {
            out.push(EndpointOutput::Event(EndpointEvent::Reconnected {
                attempt: a,
            }));
        }
        out
    }

    fn begin_reconnect(&mut self, now: SimTime) -> Vec<EndpointOutput> {
        self.phase = EndpointPhase::Reconnecting;
        self.next_attempt(now, 0)
    }

    fn next_attempt(&mut self, now: SimTime, attempt: u32) -> Vec<EndpointOutput> {
        if attempt >= self.policy.max_attempts {
            self.phase = EndpointPhase::Lost;
            return vec![EndpointOutput::Event(EndpointEvent::Lost)];
        }
        self.attempt = attempt;
        let delay = self.policy.delay(attempt, &mut self.rng);
        vec![EndpointOutput::Timer {
            at: now + delay,
            timer: EndpointTimer::Reconnect { attempt },
        }]
    }

    fn disconnect(&mut self, now: SimTime) -> Vec<EndpointOutput> {
        self.epoch += 1;
        self.disconnected_at.push(now);
        let session_id = self.session.as_mut().map(|s| {
            s.close();
            s.session_id.clone()
        });
        let tasks = self.tasks_in_flight();
        self.in_flight.clear();
        let mut out = vec![EndpointOutput::Event(EndpointEvent::Disconnected {
            session_id,
            tasks,
        })];
        out.extend(self.begin_reconnect(now));
        out
    }

    fn connected(&self) -> bool {
        matches!(
            self.phase,
            EndpointPhase::Registering | EndpointPhase::Profiling | EndpointPhase::Available
        )
    }

    pub fn on_timer(&mut self, now: SimTime, timer: EndpointTimer) -> Vec<EndpointOutput> {
        match timer {
            EndpointTimer::Heartbeat { epoch } if epoch == self.epoch && self.connected() => {
                let mut out = Vec::new();
                if let Some(s) = &mut self.session {
                    out.push(EndpointOutput::Send(
                        s.stamp(AipMessage::heartbeat(now, Direction::ClientToServer)),
                    ));
                }
                out.push(EndpointOutput::Timer {
                    at: now + self.heartbeat.interval(),
                    timer: EndpointTimer::Heartbeat { epoch },
                });
                out
            }
            EndpointTimer::Liveness { epoch } if epoch == self.epoch && self.connected() => {
                if self.monitor.is_expired(now) {
                    self.disconnect(now)
                } else {
                    vec![EndpointOutput::Timer {
                        at: self.monitor.deadline(),
                        timer: EndpointTimer::Liveness { epoch },
                    }]
                }
            }
            EndpointTimer::Reconnect { attempt }
                if self.phase == EndpointPhase::Reconnecting && attempt == self.attempt =>
            {
                self.pending_attempt = Some(attempt);
                vec![EndpointOutput::TryConnect {
                    attempt: Some(attempt),
                }]
            }
            _ => vec![],
        }
    }

    pub fn handle(&mut self, now: SimTime, msg: AipMessage) -> Vec<EndpointOutput> {
        if !self.connected() {
            return vec![];
        }
        if self.phase == EndpointPhase::Registering {
            if let MessageBody::Heartbeat(hb) = &msg.body {
                if let (Some("OK"), Some(sid)) = (hb.status.as_deref(), &msg.session_id) {
                    self.monitor.observe(now);
                    let mut s = SessionState::new(sid.clone(), &self.device_id);
                    let _ = s.accept(&msg);
                    self.next_request += 1;
                    let req =
                        AipMessage::new(MessageBody::DeviceInfoRequest(DeviceInfoRequestBody {
                            target_id: self.device_id.clone(),
                            request_id: format!(
                                "{}-{}-q{}",
                                self.client_id, self.device_id, self.next_request
                            ),
                        }));
                    let req = s.stamp(req);
                    self.session = Some(s);
                    self.phase = EndpointPhase::Profiling;
                    return vec![EndpointOutput::Send(req)];
                }
            }
            if let MessageBody::Error(e) = &msg.body {
                tracing::warn!(device = %self.device_id, error = %e.error, "registration refused");
                return self.disconnect(now);
            }
            return vec![];
        }
        let Some(session) = &mut self.session else {
            return vec![];
        };
        if msg.session_id.as_deref() != Some(session.session_id.as_str()) {
            return vec![];
        }
        match session.accept(&msg) {
            Ok(Acceptance::Fresh) => {}
            Ok(_) => return vec![],
            Err(e) => {
                tracing::warn!(device = %self.device_id, %e, "endpoint rejected message");
                return vec![];
            }
        }
        self.monitor.observe(now);
        match msg.body {
            MessageBody::DeviceInfoResponse(resp) if self.phase == EndpointPhase::Profiling => {
                let fragment = |key: &str| -> ProfileFragment {
                    resp.result
                        .get(key)
                        .cloned()
                        .and_then(|v| serde_json::from_value(v).ok())
                        .unwrap_or_default()
                };
                let mut profile = AgentProfile::merged(
                    self.device_id.as_str(),
                    &self.user_config,
                    &fragment("manifest"),
                    &fragment("telemetry"),
                );
                profile.last_heartbeat = Some(now);
                self.profile = Some(profile.clone());
                self.phase = EndpointPhase::Available;
                vec![EndpointOutput::Event(EndpointEvent::Available(profile))]
            }
            MessageBody::TaskEnd(end) => match self.in_flight.pop_front() {
                Some((task_id, false)) => vec![EndpointOutput::Event(EndpointEvent::TaskEnded {
                    task_id,
                    end,
                })],
                _ => vec![],
            },
            _ => vec![],
        }
    }

    /// Sends a task. Fails without any traffic unless the device is
    /// available.
    pub fn dispatch(&mut self, request: TaskRequest) -> Result<Vec<EndpointOutput>, EndpointError> {
        if self.phase != EndpointPhase::Available {
            return Err(EndpointError::PeerDisconnected(self.device_id.clone()));
        }
        let session = self.session.as_mut().expect("available implies a session");
        self.in_flight.push_back((request.task_id.clone(), false));
        let msg = session.stamp(AipMessage::new(MessageBody::Task(TaskBody { request })));
        Ok(vec![EndpointOutput::Send(msg)])
    }

    /// Forgets a task; its eventual `TASK_END` is swallowed.
    pub fn cancel(&mut self, task_id: &str) {
        for (t, cancelled) in &mut self.in_flight {
            if t == task_id {
                *cancelled = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoint() -> ConstellationEndpoint {
        ConstellationEndpoint::new(
            "galaxy",
            "linux1",
            ProfileFragment::default(),
            HeartbeatConfig::default(),
            BackoffPolicy {
                jitter: 0.0,
                ..Default::default()
            },
            0,
        )
    }

    fn timers(out: &[EndpointOutput]) -> Vec<(SimTime, EndpointTimer)> {
        out.iter()
            .filter_map(|o| match o {
                EndpointOutput::Timer { at, timer } => Some((*at, *timer)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn dispatch_requires_availability() {
        let mut e = endpoint();
        let req = TaskRequest {
            task_id: "A".into(),
            name: "A".into(),
            description: "d".into(),
            tips: vec![],
            inputs: vec![],
        };
        assert_eq!(
            e.dispatch(req).unwrap_err(),
            EndpointError::PeerDisconnected("linux1".into())
        );
    }

    #[test]
    fn silence_disconnects_at_three_intervals_then_backs_off() {
        let mut e = endpoint();
        e.start();
        let out = e.connect_result(SimTime::ZERO, true);
        let liveness = timers(&out)
            .into_iter()
            .find(|(_, t)| matches!(t, EndpointTimer::Liveness { .. }))
            .unwrap();
        assert_eq!(liveness.0, SimTime::from_secs(15.0));
        let out = e.on_timer(liveness.0, liveness.1);
        assert!(matches!(
            out[0],
            EndpointOutput::Event(EndpointEvent::Disconnected { .. })
        ));
        assert_eq!(e.phase(), EndpointPhase::Reconnecting);

        // Link never returns: attempts at +1, +3, +7, +15, +31, then lost.
        let mut at = Vec::new();
        let mut pending = timers(&out);
        while let Some((t, timer)) = pending.pop() {
            at.push(t.as_secs() - 15.0);
            e.on_timer(t, timer);
            let out = e.connect_result(t, false);
            pending = timers(&out);
        }
        assert_eq!(at, [1.0, 3.0, 7.0, 15.0, 31.0]);
        assert_eq!(e.phase(), EndpointPhase::Lost);
    }

    #[test]
    fn late_heartbeat_after_disconnect_is_ignored() {
        let mut e = endpoint();
        e.start();
        e.connect_result(SimTime::ZERO, true);
        let ack = AipMessage::heartbeat_ok(SimTime::ZERO, Direction::ServerToClient)
            .with_session("linux1-s1");
        e.handle(SimTime::from_secs(0.01), ack.clone());
        assert_eq!(e.phase(), EndpointPhase::Profiling);
        e.on_timer(
            SimTime::from_secs(15.01),
            EndpointTimer::Liveness { epoch: 1 },
        );
        assert_eq!(e.phase(), EndpointPhase::Reconnecting);
        assert!(e.handle(SimTime::from_secs(16.0), ack).is_empty());
        assert_eq!(e.phase(), EndpointPhase::Reconnecting);
    }
}
