use std::collections::VecDeque;

use serde_json::json;

use super::executor::Executor;
use crate::aip::message::{
    ActionResult, AipMessage, CommandBody, CommandResultsBody, Direction, MessageBody,
};
use crate::aip::profile::ProfileFragment;
use crate::aip::session::{Acceptance, SessionState};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientTimer {
    BatchDone { response_id: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientOutput {
    Send(AipMessage),
    Timer { at: SimTime, timer: ClientTimer },
}

struct Running {
    response_id: String,
    results: Vec<ActionResult>,
}

/// The executing half of a device agent. It runs command batches one at a
/// time, in arrival order, and never decides anything about task state.
pub struct DeviceClient {
    device_id: String,
    manifest: ProfileFragment,
    telemetry: ProfileFragment,
    executor: Box<dyn Executor>,
    session: Option<SessionState>,
    queue: VecDeque<CommandBody>,
    running: Option<Running>,
    executed: usize,
}

impl DeviceClient {
    pub fn new(
        device_id: impl Into<String>,
        manifest: ProfileFragment,
        telemetry: ProfileFragment,
        executor: Box<dyn Executor>,
    ) -> Self {
        Self {
            device_id: device_id.into(),
            manifest,
            telemetry,
            executor,
            session: None,
            queue: VecDeque::new(),
            running: None,
            executed: 0,
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn telemetry(&self) -> &ProfileFragment {
        &self.telemetry
    }

    /// Commands executed so far, across all batches.
    pub fn executed(&self) -> usize {
        self.executed
    }

    pub fn is_registered(&self) -> bool {
        self.session.is_some()
    }

    pub fn is_busy(&self) -> bool {
        self.running.is_some() || !self.queue.is_empty()
    }

    /// Announces the device to its server with manifest and telemetry.
    pub fn boot(&mut self) -> Vec<ClientOutput> {
        vec![ClientOutput::Send(AipMessage::register(
            &self.device_id,
            json!({"role": "device_client", "manifest": self.manifest, "telemetry": self.telemetry}),
        ))]
    }

    pub fn handle(&mut self, now: SimTime, msg: AipMessage) -> Vec<ClientOutput> {
        if let (None, MessageBody::Heartbeat(hb)) = (&self.session, &msg.body) {
            if hb.status.as_deref() == Some("OK") {
                if let Some(sid) = &msg.session_id {
                    let mut s = SessionState::new(sid.clone(), "server");
                    let _ = s.accept(&msg);
                    self.session = Some(s);
                }
            }
            return vec![];
        }
        let Some(session) = &mut self.session else {
            return vec![];
        };
        match session.accept(&msg) {
            Ok(Acceptance::Fresh) => {}
            Ok(_) => return vec![],
            Err(e) => {
                tracing::warn!(device = %self.device_id, %e, "client rejected message");
                return vec![];
            }
        }
        match msg.body {
            MessageBody::Command(body) => {
                self.queue.push_back(body);
                self.start_next(now)
            }
            MessageBody::Heartbeat(hb) if hb.status.is_none() => {
                let ack = AipMessage::heartbeat_ok(now, Direction::ClientToServer);
                vec![ClientOutput::Send(session.stamp(ack))]
            }
            _ => vec![],
        }
    }

    fn start_next(&mut self, now: SimTime) -> Vec<ClientOutput> {
        if self.running.is_some() {
            return vec![];
        }
        let Some(batch) = self.queue.pop_front() else {
            return vec![];
        };
        let mut total = SimDuration::ZERO;
        let mut results = Vec::with_capacity(batch.actions.len());
        for cmd in &batch.actions {
            self.executed += 1;
            match self.executor.execute(cmd, &self.telemetry) {
                Ok(out) => {
                    total += out.duration;
                    results.push(out.result);
                }
                Err(e) => results.push(ActionResult::failed(&cmd.id, e.to_string())),
            }
        }
        let response_id = batch.response_id;
        self.running = Some(Running {
            response_id: response_id.clone(),
            results,
        });
        vec![ClientOutput::Timer {
            at: now + total,
            timer: ClientTimer::BatchDone { response_id },
        }]
    }

    pub fn on_timer(&mut self, now: SimTime, timer: ClientTimer) -> Vec<ClientOutput> {
        let ClientTimer::BatchDone { response_id } = timer;
        if self.running.as_ref().map(|r| &r.response_id) != Some(&response_id) {
            return vec![];
        }
        let done = self.running.take().expect("checked");
        let mut out = Vec::new();
        if let Some(session) = &mut self.session {
            session.answer_command(&done.response_id);
            let msg = AipMessage::new(MessageBody::CommandResults(CommandResultsBody {
                action_results: done.results,
                prev_response_id: done.response_id,
            }));
            out.push(ClientOutput::Send(session.stamp(msg)));
        }
        out.extend(self.start_next(now));
        out
    }

    /// Cancels a batch whose task was aborted server-side. The batch is still
    /// answered, once, with every action failed, so no command is left
    /// without results.
    pub fn abort(&mut self, now: SimTime, response_id: &str) -> Vec<ClientOutput> {
        let ids: Vec<String> =
            if let Some(pos) = self.queue.iter().position(|b| b.response_id == response_id) {
                let batch = self.queue.remove(pos).expect("position is valid");
                batch.actions.into_iter().map(|a| a.id).collect()
            } else if self
                .running
                .as_ref()
                .is_some_and(|r| r.response_id == response_id)
            {
                let r = self.running.take().expect("checked");
                r.results.into_iter().map(|a| a.command_id).collect()
            } else {
                return vec![];
            };
        let mut out = Vec::new();
        if let Some(session) = &mut self.session {
            session.answer_command(response_id);
            let msg = AipMessage::new(MessageBody::CommandResults(CommandResultsBody {
                action_results: ids
                    .iter()
                    .map(|id| ActionResult::failed(id, "aborted: task cancelled by server"))
                    .collect(),
                prev_response_id: response_id.to_owned(),
            }));
            out.push(ClientOutput::Send(session.stamp(msg)));
        }
        out.extend(self.start_next(now));
        out
    }
}
