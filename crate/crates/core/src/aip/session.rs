//! Per-session sequencing and correlation, plus the wire log used to audit
//! whole runs after the fact.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::message::{AipMessage, Direction, Idempotency, MessageBody, MsgType};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionPhase {
    Registering,
    Active,
    EditingTask,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session `{0}` is closed")]
    Closed(String),
    #[error("COMMAND seq {0} delivered twice; commands are never replayed")]
    ReplayedCommand(u64),
    #[error("{msg_type} refers to unknown id `{id}`")]
    UnknownCorrelation { msg_type: MsgType, id: String },
}

/// What the receiver should do with an accepted message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acceptance {
    Fresh,
    /// Already seen; idempotent, so dropping it leaves state unchanged.
    Duplicate,
    /// A `TASK` for a task that is already active: acknowledge, do not rerun.
    ActiveTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub peer: String,
    pub phase: SessionPhase,
    next_seq: u64,
    last_seq_in: Option<u64>,
    sent_requests: BTreeSet<String>,
    outstanding_commands: BTreeSet<String>,
    active_tasks: BTreeSet<String>,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, peer: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            peer: peer.into(),
            phase: SessionPhase::Registering,
            // Seq 0 belongs to the unsessioned REGISTER that opened the stream.
            next_seq: 1,
            last_seq_in: None,
            sent_requests: BTreeSet::new(),
            outstanding_commands: BTreeSet::new(),
            active_tasks: BTreeSet::new(),
        }
    }

    /// Assigns the session id and the next send sequence number.
    pub fn stamp(&mut self, mut msg: AipMessage) -> AipMessage {
        msg.session_id = Some(self.session_id.clone());
        msg.seq = self.next_seq;
        self.next_seq += 1;
        match &msg.body {
            MessageBody::Command(b) => {
                self.sent_requests.insert(b.response_id.clone());
            }
            MessageBody::DeviceInfoRequest(b) => {
                self.sent_requests.insert(b.request_id.clone());
            }
            MessageBody::Task(b) => {
                self.active_tasks.insert(b.request.task_id.clone());
                self.phase = SessionPhase::EditingTask;
            }
            MessageBody::TaskEnd(_) => self.end_tasks(),
            _ => {}
        }
        msg
    }

    pub fn outstanding_commands(&self) -> &BTreeSet<String> {
        &self.outstanding_commands
    }

    pub fn active_tasks(&self) -> &BTreeSet<String> {
        &self.active_tasks
    }

    /// Ends every active task and every command expectation tied to it.
    pub fn end_tasks(&mut self) {
        self.active_tasks.clear();
        self.outstanding_commands.clear();
        if self.phase == SessionPhase::EditingTask {
            self.phase = SessionPhase::Active;
        }
    }

    pub fn close(&mut self) {
        self.phase = SessionPhase::Closed;
        self.end_tasks();
        self.phase = SessionPhase::Closed;
    }

    /// Checks sequencing and correlation of an inbound message and updates
    /// the session accordingly. Duplicates of idempotent messages change
    /// nothing.
    pub fn accept(&mut self, msg: &AipMessage) -> Result<Acceptance, SessionError> {
        if self.phase == SessionPhase::Closed {
            return Err(SessionError::Closed(self.session_id.clone()));
        }
        if self.last_seq_in.is_some_and(|last| msg.seq <= last) {
            return match msg.msg_type().idempotency() {
                Idempotency::No => Err(SessionError::ReplayedCommand(msg.seq)),
                _ => Ok(Acceptance::Duplicate),
            };
        }
        let unknown = |id: &str| SessionError::UnknownCorrelation {
            msg_type: msg.msg_type(),
            id: id.to_owned(),
        };
        let acceptance = match &msg.body {
            MessageBody::CommandResults(b) => {
                if !self.sent_requests.remove(&b.prev_response_id) {
                    return Err(unknown(&b.prev_response_id));
                }
                Acceptance::Fresh
            }
            MessageBody::DeviceInfoResponse(b) => {
                if !self.sent_requests.remove(&b.response_id) {
                    return Err(unknown(&b.response_id));
                }
                Acceptance::Fresh
            }
            MessageBody::Command(b) => {
                self.outstanding_commands.insert(b.response_id.clone());
                Acceptance::Fresh
            }
            MessageBody::Task(b) => {
                if !self.active_tasks.insert(b.request.task_id.clone()) {
                    Acceptance::ActiveTask
                } else {
                    self.phase = SessionPhase::EditingTask;
                    Acceptance::Fresh
                }
            }
            MessageBody::TaskEnd(_) => {
                self.end_tasks();
                Acceptance::Fresh
            }
            _ => Acceptance::Fresh,
        };
        if self.phase == SessionPhase::Registering && !matches!(msg.body, MessageBody::Register(_))
        {
            self.phase = SessionPhase::Active;
        }
        self.last_seq_in = Some(msg.seq);
        Ok(acceptance)
    }

    /// Marks a command as answered on the executing side.
    pub fn answer_command(&mut self, response_id: &str) {
        self.outstanding_commands.remove(response_id);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fate {
    Delivered,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub sent_at: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_at: Option<SimTime>,
    pub link: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub seq: u64,
    pub msg_type: MsgType,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<String>,
    pub fate: Fate,
}

impl WireRecord {
    pub fn new(
        link: &str,
        msg: &AipMessage,
        sent_at: SimTime,
        delivered_at: Option<SimTime>,
    ) -> Self {
        Self {
            sent_at,
            delivered_at,
            link: link.to_owned(),
            session_id: msg.session_id.clone(),
            seq: msg.seq,
            msg_type: msg.msg_type(),
            direction: msg.direction,
            correlation: msg.correlation_id().map(str::to_owned),
            fate: if delivered_at.is_some() {
                Fate::Delivered
            } else {
                Fate::Dropped
            },
        }
    }
}

/// Every frame put on any link, in send order, plus the sessions that were
/// torn down by a fault and so never completed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireLog {
    pub records: Vec<WireRecord>,
    pub faulted_sessions: BTreeSet<String>,
}

impl WireLog {
    pub fn push(&mut self, record: WireRecord) {
        self.records.push(record);
    }

    pub fn mark_faulted(&mut self, session_id: &str) {
        self.faulted_sessions.insert(session_id.to_owned());
    }

    fn sessions(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter_map(|r| r.session_id.as_deref())
            .collect()
    }

    pub fn completed_sessions(&self) -> BTreeSet<&str> {
        self.sessions()
            .into_iter()
            .filter(|s| !self.faulted_sessions.contains(*s))
            .collect()
    }

    /// Within each session and direction, delivered frames must arrive in
    /// send order.
    pub fn fifo_violations(&self) -> Vec<String> {
        let mut streams: BTreeMap<(&str, &str, Direction), Vec<&WireRecord>> = BTreeMap::new();
        for r in &self.records {
            if let (Some(s), Some(_)) = (r.session_id.as_deref(), r.delivered_at) {
                streams
                    .entry((&r.link, s, r.direction))
                    .or_default()
                    .push(r);
            }
        }
        let mut out = Vec::new();
        for ((link, session, dir), mut recs) in streams {
            recs.sort_by_key(|r| r.delivered_at);
            for w in recs.windows(2) {
                if w[1].seq <= w[0].seq {
                    out.push(format!(
                        "{link}/{session} {dir:?}: seq {} delivered after seq {}",
                        w[1].seq, w[0].seq
                    ));
                }
            }
        }
        out
    }

    /// In every completed session, each delivered COMMAND is answered by
    /// exactly one COMMAND_RESULTS and TASK and TASK_END alternate, starting
    /// with TASK and ending balanced.
    pub fn correlation_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for session in self.completed_sessions() {
            let mut delivered: Vec<&WireRecord> = self
                .records
                .iter()
                .filter(|r| r.session_id.as_deref() == Some(session) && r.delivered_at.is_some())
                .collect();
            delivered.sort_by_key(|r| r.delivered_at);
            let mut commands: BTreeMap<&str, usize> = BTreeMap::new();
            let mut open_task: Option<&str> = None;
            for r in &delivered {
                let corr = r.correlation.as_deref().unwrap_or("");
                match r.msg_type {
                    MsgType::Command => {
                        commands.entry(corr).or_insert(0);
                    }
                    MsgType::CommandResults => match commands.get_mut(corr) {
                        Some(n) => *n += 1,
                        None => {
                            out.push(format!("{session}: results for unknown command `{corr}`"))
                        }
                    },
                    MsgType::Task => {
                        if let Some(t) = open_task {
                            out.push(format!("{session}: TASK `{corr}` while `{t}` open"));
                        }
                        open_task = Some(corr);
                    }
                    MsgType::TaskEnd => {
                        let ended = open_task.take();
                        if ended.is_none() {
                            out.push(format!("{session}: TASK_END without TASK"));
                        }
                    }
                    _ => {}
                }
            }
            if let Some(t) = open_task {
                out.push(format!("{session}: TASK `{t}` never ended"));
            }
            for (cmd, n) in commands {
                if n != 1 {
                    out.push(format!("{session}: COMMAND `{cmd}` answered {n} times"));
                }
            }
        }
        out
    }

    pub fn count(&self, msg_type: MsgType) -> usize {
        self.records
            .iter()
            .filter(|r| r.msg_type == msg_type)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::super::message::{CommandBody, CommandResultsBody};
    use super::*;

    fn command(id: &str) -> AipMessage {
        AipMessage::new(MessageBody::Command(CommandBody {
            actions: vec![],
            response_id: id.into(),
        }))
    }

    fn results(id: &str) -> AipMessage {
        AipMessage::new(MessageBody::CommandResults(CommandResultsBody {
            action_results: vec![],
            prev_response_id: id.into(),
        }))
    }

    #[test]
    fn results_must_answer_a_sent_command() {
        let mut server = SessionState::new("s", "client");
        let mut client = SessionState::new("s", "server");
        let cmd = server.stamp(command("r1"));
        assert_eq!(client.accept(&cmd), Ok(Acceptance::Fresh));
        let res = client.stamp(results("r1"));
        assert_eq!(server.accept(&res), Ok(Acceptance::Fresh));
        let stray = client.stamp(results("r9"));
        assert!(matches!(
            server.accept(&stray),
            Err(SessionError::UnknownCorrelation { .. })
        ));
    }

    #[test]
    fn duplicate_idempotent_message_changes_nothing() {
        let mut a = SessionState::new("s", "b");
        let mut b = SessionState::new("s", "a");
        let hb = a.stamp(AipMessage::heartbeat(
            SimTime::ZERO,
            Direction::ClientToServer,
        ));
        b.accept(&hb).unwrap();
        let before = b.clone();
        assert_eq!(b.accept(&hb), Ok(Acceptance::Duplicate));
        assert_eq!(b, before);
    }

    #[test]
    fn replayed_command_is_an_error() {
        let mut a = SessionState::new("s", "b");
        let mut b = SessionState::new("s", "a");
        let cmd = a.stamp(command("r1"));
        b.accept(&cmd).unwrap();
        assert_eq!(b.accept(&cmd), Err(SessionError::ReplayedCommand(1)));
    }

    #[test]
    fn wire_log_checks() {
        let mut log = WireLog::default();
        let mut s = SessionState::new("s1", "peer");
        let c = s.stamp(command("r1"));
        let c2 = s.stamp(command("r2"));
        let r = s.stamp(results("r1"));
        let t = |x: f64| Some(SimTime::from_secs(x));
        log.push(WireRecord::new("l", &c, SimTime::ZERO, t(1.0)));
        log.push(WireRecord::new("l", &c2, SimTime::ZERO, t(0.8)));
        log.push(WireRecord::new("l", &r, SimTime::ZERO, t(0.5)));
        // c2 overtook c1 in the same direction; r travels the other way.
        assert_eq!(log.fifo_violations().len(), 1);
        // Results ahead of their command count as unknown; both commands
        // then stay unanswered.
        assert_eq!(log.correlation_violations().len(), 3);
        log.mark_faulted("s1");
        assert!(log.correlation_violations().is_empty());
    }
}
