//! Synchronous task execution against one server/client pair. Frames travel
//! through in-memory transports and the real codec; time is virtual.

use serde_json::json;
use thiserror::Error;

use super::client::{ClientOutput, ClientTimer, DeviceClient};
use super::pipeline::failure_end;
use super::server::{DeviceAgentServer, ServerOutput, ServerPeer};
use crate::aip::message::{
    decode, encode, AipMessage, MessageBody, TaskBody, TaskEndBody, TaskRequest,
};
use crate::aip::transport::{memory_pair, MemoryTransport, Transport};
use crate::constellation::FailureReason;
use crate::sim::clock::VirtualClock;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServeError {
    #[error("frame rejected: {0}")]
    Schema(#[from] crate::aip::message::SchemaViolation),
    #[error("task never ended")]
    NoTaskEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Served {
    pub end: TaskEndBody,
    pub elapsed: SimDuration,
    /// Every frame the constellation side received, in order.
    pub received: Vec<AipMessage>,
}

enum Timer {
    /// Server liveness checks are irrelevant on the idle harness link.
    Server,
    Client(ClientTimer),
}

const CONN: &str = "serve";

struct Harness<'a> {
    server: &'a mut DeviceAgentServer,
    client: Option<&'a mut DeviceClient>,
    clock: VirtualClock<Timer>,
    // (server end, other end)
    to_client: Option<(MemoryTransport, MemoryTransport)>,
    to_constellation: (MemoryTransport, MemoryTransport),
    received: Vec<AipMessage>,
}

impl Harness<'_> {
    fn apply_server(&mut self, outputs: Vec<ServerOutput>) {
        for o in outputs {
            match o {
                ServerOutput::Send {
                    to: ServerPeer::DeviceClient,
                    msg,
                } => {
                    if let Some((s, _)) = &mut self.to_client {
                        let _ = s.send(encode(&msg));
                    }
                }
                ServerOutput::Send { msg, .. } => {
                    let _ = self.to_constellation.0.send(encode(&msg));
                }
                ServerOutput::Timer { at, .. } => {
                    self.clock.schedule_at(at, Timer::Server);
                }
                ServerOutput::AbortBatch { response_id } => {
                    let now = self.clock.now();
                    if let Some(c) = self.client.as_deref_mut() {
                        let out = c.abort(now, &response_id);
                        self.apply_client(out);
                    }
                }
                ServerOutput::SessionFaulted { .. } => {}
            }
        }
    }

    fn apply_client(&mut self, outputs: Vec<ClientOutput>) {
        for o in outputs {
            match o {
                ClientOutput::Send(msg) => {
                    if let Some((_, c)) = &mut self.to_client {
                        let _ = c.send(encode(&msg));
                    }
                }
                ClientOutput::Timer { at, timer } => {
                    self.clock.schedule_at(at, Timer::Client(timer));
                }
            }
        }
    }

    /// Delivers every queued frame; returns whether anything moved.
    fn pump(&mut self) -> Result<bool, ServeError> {
        let now = self.clock.now();
        let mut moved = false;
        if let Some((s, c)) = &mut self.to_client {
            if let Some(f) = c.recv() {
                let msg = decode(&f)?;
                let out = self.client.as_deref_mut().map(|cl| cl.handle(now, msg));
                self.apply_client(out.unwrap_or_default());
                moved = true;
            } else if let Some(f) = s.recv() {
                let out = self.server.handle_from_client(now, decode(&f)?);
                self.apply_server(out);
                moved = true;
            }
        }
        if let Some(f) = self.to_constellation.0.recv() {
            let out = self
                .server
                .handle_from_constellation(now, CONN, decode(&f)?);
            self.apply_server(out);
            moved = true;
        }
        if let Some(f) = self.to_constellation.1.recv() {
            self.received.push(decode(&f)?);
            moved = true;
        }
        Ok(moved)
    }
}

/// Runs `request` to completion on `server`, with `client` as its executing
/// half. With no client the task fails as disconnected without any traffic.
pub fn serve_task(
    server: &mut DeviceAgentServer,
    client: Option<&mut DeviceClient>,
    request: TaskRequest,
) -> Result<Served, ServeError> {
    let Some(client) = client else {
        return Ok(Served {
            end: failure_end(
                FailureReason::AgentDisconnected,
                "no device client connected",
            ),
            elapsed: SimDuration::ZERO,
            received: vec![],
        });
    };
    let task_id = request.task_id.clone();
    let boot = client.boot();
    let mut h = Harness {
        server,
        client: Some(client),
        clock: VirtualClock::new(SimTime::ZERO),
        to_client: Some(memory_pair()),
        to_constellation: memory_pair(),
        received: Vec::new(),
    };
    h.apply_client(boot);
    let register = AipMessage::register("serve-client", json!({"role": "constellation_client"}));
    let _ = h.to_constellation.1.send(encode(&register));
    while h.pump()? {}
    let session = h
        .received
        .iter()
        .find_map(|m| m.session_id.clone())
        .unwrap_or_default();
    let task = AipMessage::new(MessageBody::Task(TaskBody { request }))
        .with_session(session)
        .with_direction(crate::aip::message::Direction::ClientToServer);
    let mut task = task;
    task.seq = 1;
    let _ = h.to_constellation.1.send(encode(&task));
    let started = h.clock.now();
    loop {
        while h.pump()? {}
        if let Some(end) = h.received.iter().find_map(|m| match &m.body {
            MessageBody::TaskEnd(b) => Some(b.clone()),
            _ => None,
        }) {
            tracing::debug!(task = %task_id, "task ended");
            return Ok(Served {
                end,
                elapsed: h.clock.now().since(started),
                received: h.received,
            });
        }
        // Only client batch timers matter here; the server's liveness check
        // would fire on the idle harness connection.
        let Some((now, timer)) = h.clock.pop_next() else {
            return Err(ServeError::NoTaskEnd);
        };
        match timer {
            Timer::Client(t) => {
                let out = h.client.as_deref_mut().expect("client").on_timer(now, t);
                h.apply_client(out);
            }
            Timer::Server => {}
        }
    }
}
