//! The nine message types, their per-type schemas and the wire codec.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. The JSON object holds the envelope keys `msg_type`,
//! `direction`, `seq` and optional `session_id`, plus the body fields of the
//! message type. Decoding rejects unknown types, unknown keys, missing keys
//! and empty correlation ids.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    Register,
    Task,
    Command,
    CommandResults,
    TaskEnd,
    Heartbeat,
    DeviceInfoRequest,
    DeviceInfoResponse,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    ClientToServer,
    ServerToClient,
    Bidirectional,
}

/// Whether duplicate delivery of a message type is harmless.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Idempotency {
    Yes,
    /// A duplicate for an already-active task is acknowledged, not re-run.
    Limited,
    /// Must never be replayed.
    No,
    NotApplicable,
}

impl MsgType {
    pub const ALL: [MsgType; 9] = [
        MsgType::Register,
        MsgType::Task,
        MsgType::Command,
        MsgType::CommandResults,
        MsgType::TaskEnd,
        MsgType::Heartbeat,
        MsgType::DeviceInfoRequest,
        MsgType::DeviceInfoResponse,
        MsgType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Register => "REGISTER",
            MsgType::Task => "TASK",
            MsgType::Command => "COMMAND",
            MsgType::CommandResults => "COMMAND_RESULTS",
            MsgType::TaskEnd => "TASK_END",
            MsgType::Heartbeat => "HEARTBEAT",
            MsgType::DeviceInfoRequest => "DEVICE_INFO_REQUEST",
            MsgType::DeviceInfoResponse => "DEVICE_INFO_RESPONSE",
            MsgType::Error => "ERROR",
        }
    }

    pub fn parse(s: &str) -> Option<MsgType> {
        MsgType::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Canonical direction; `Bidirectional` for types either side may send.
    pub fn direction(self) -> Direction {
        match self {
            MsgType::Register
            | MsgType::Task
            | MsgType::CommandResults
            | MsgType::DeviceInfoRequest => Direction::ClientToServer,
            MsgType::Command | MsgType::TaskEnd | MsgType::DeviceInfoResponse => {
                Direction::ServerToClient
            }
            MsgType::Heartbeat | MsgType::Error => Direction::Bidirectional,
        }
    }

    pub fn idempotency(self) -> Idempotency {
        match self {
            MsgType::Register
            | MsgType::CommandResults
            | MsgType::TaskEnd
            | MsgType::Heartbeat
            | MsgType::DeviceInfoRequest
            | MsgType::DeviceInfoResponse => Idempotency::Yes,
            MsgType::Task => Idempotency::Limited,
            MsgType::Command => Idempotency::No,
            MsgType::Error => Idempotency::NotApplicable,
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One command in a `COMMAND` batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Command {
    pub id: String,
    /// Registered tool name, e.g. `EXEC_CLI`.
    pub function: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, Value>,
}

impl Command {
    pub fn new(id: impl Into<String>, function: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            function: function.into(),
            arguments: BTreeMap::new(),
        }
    }

    pub fn arg(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.arguments.insert(key.into(), value.into());
        self
    }

    pub fn str_arg(&self, key: &str) -> Option<&str> {
        self.arguments.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionStatus {
    Success,
    Failure,
}

/// Structured outcome of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionResult {
    pub command_id: String,
    pub status: ActionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_code: Option<i32>,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ActionResult {
    pub fn ok(command_id: impl Into<String>, stdout: impl Into<String>) -> Self {
        Self {
            command_id: command_id.into(),
            status: ActionStatus::Success,
            return_code: Some(0),
            stdout: stdout.into(),
            stderr: String::new(),
            info: None,
            error: None,
        }
    }

    pub fn failed(command_id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            command_id: command_id.into(),
            status: ActionStatus::Failure,
            return_code: None,
            stdout: String::new(),
            stderr: String::new(),
            info: None,
            error: Some(error.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ActionStatus::Success
    }
}

/// Task handed to a device agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub task_id: String,
    #[serde(default)]
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub tips: Vec<String>,
    /// Upstream outcomes, one object per incoming edge.
    #[serde(default)]
    pub inputs: Vec<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskEndStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterBody {
    pub client_id: String,
    #[serde(default)]
    pub metadata: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBody {
    pub request: TaskRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandBody {
    pub actions: Vec<Command>,
    pub response_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandResultsBody {
    pub action_results: Vec<ActionResult>,
    pub prev_response_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEndBody {
    pub status: TaskEndStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatBody {
    pub timestamp: SimTime,
    /// `OK` on acknowledgements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceInfoRequestBody {
    pub target_id: String,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceInfoResponseBody {
    pub result: Value,
    pub response_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub context: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    Register(RegisterBody),
    Task(TaskBody),
    Command(CommandBody),
    CommandResults(CommandResultsBody),
    TaskEnd(TaskEndBody),
    Heartbeat(HeartbeatBody),
    DeviceInfoRequest(DeviceInfoRequestBody),
    DeviceInfoResponse(DeviceInfoResponseBody),
    Error(ErrorBody),
}

impl MessageBody {
    pub fn msg_type(&self) -> MsgType {
        match self {
            MessageBody::Register(_) => MsgType::Register,
            MessageBody::Task(_) => MsgType::Task,
            MessageBody::Command(_) => MsgType::Command,
            MessageBody::CommandResults(_) => MsgType::CommandResults,
            MessageBody::TaskEnd(_) => MsgType::TaskEnd,
            MessageBody::Heartbeat(_) => MsgType::Heartbeat,
            MessageBody::DeviceInfoRequest(_) => MsgType::DeviceInfoRequest,
            MessageBody::DeviceInfoResponse(_) => MsgType::DeviceInfoResponse,
            MessageBody::Error(_) => MsgType::Error,
        }
    }
}

/// A message with its envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct AipMessage {
    pub direction: Direction,
    /// Per-session send sequence number, assigned by the session.
    pub seq: u64,
    pub session_id: Option<String>,
    pub body: MessageBody,
}

impl AipMessage {
    /// A message with its canonical direction. Bidirectional types default
    /// to client-to-server; use [`AipMessage::with_direction`] otherwise.
    pub fn new(body: MessageBody) -> Self {
        let direction = match body.msg_type().direction() {
            Direction::Bidirectional => Direction::ClientToServer,
            d => d,
        };
        Self {
            direction,
            seq: 0,
            session_id: None,
            body,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_session(mut self, session_id: impl Into<String>) -> Self {
        self.session_id = Some(session_id.into());
        self
    }

    pub fn msg_type(&self) -> MsgType {
        self.body.msg_type()
    }

    /// The id that ties this message to its request or response, if any.
    pub fn correlation_id(&self) -> Option<&str> {
        match &self.body {
            MessageBody::Command(b) => Some(&b.response_id),
            MessageBody::CommandResults(b) => Some(&b.prev_response_id),
            MessageBody::DeviceInfoRequest(b) => Some(&b.request_id),
            MessageBody::DeviceInfoResponse(b) => Some(&b.response_id),
            MessageBody::Task(b) => Some(&b.request.task_id),
            _ => None,
        }
    }

    pub fn register(client_id: impl Into<String>, metadata: Value) -> Self {
        Self::new(MessageBody::Register(RegisterBody {
            client_id: client_id.into(),
            metadata,
        }))
    }

    pub fn heartbeat(timestamp: SimTime, direction: Direction) -> Self {
        Self::new(MessageBody::Heartbeat(HeartbeatBody {
            timestamp,
            status: None,
        }))
        .with_direction(direction)
    }

    pub fn heartbeat_ok(timestamp: SimTime, direction: Direction) -> Self {
        Self::new(MessageBody::Heartbeat(HeartbeatBody {
            timestamp,
            status: Some("OK".into()),
        }))
        .with_direction(direction)
    }

    pub fn error(error: impl Into<String>, context: Value, direction: Direction) -> Self {
        Self::new(MessageBody::Error(ErrorBody {
            error: error.into(),
            context,
        }))
        .with_direction(direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema violation at `{field}`: {reason}")]
pub struct SchemaViolation {
    pub field: String,
    pub reason: String,
}

impl SchemaViolation {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

fn body_value<T: Serialize>(body: &T) -> Map<String, Value> {
    match serde_json::to_value(body).expect("bodies always serialize") {
        Value::Object(m) => m,
        _ => unreachable!("bodies are structs"),
    }
}

/// The JSON object for `msg`, without framing.
pub fn to_json(msg: &AipMessage) -> Value {
    let mut obj = match &msg.body {
        MessageBody::Register(b) => body_value(b),
        MessageBody::Task(b) => body_value(b),
        MessageBody::Command(b) => body_value(b),
        MessageBody::CommandResults(b) => body_value(b),
        MessageBody::TaskEnd(b) => body_value(b),
        MessageBody::Heartbeat(b) => body_value(b),
        MessageBody::DeviceInfoRequest(b) => body_value(b),
        MessageBody::DeviceInfoResponse(b) => body_value(b),
        MessageBody::Error(b) => body_value(b),
    };
    obj.insert("msg_type".into(), Value::from(msg.msg_type().as_str()));
    obj.insert(
        "direction".into(),
        serde_json::to_value(msg.direction).expect("enum"),
    );
    obj.insert("seq".into(), Value::from(msg.seq));
    if let Some(s) = &msg.session_id {
        obj.insert("session_id".into(), Value::from(s.as_str()));
    }
    Value::Object(obj)
}

pub fn encode(msg: &AipMessage) -> Vec<u8> {
    let json = serde_json::to_vec(&to_json(msg)).expect("values always serialize");
    let len = u32::try_from(json.len()).expect("frame fits in u32");
    let mut frame = Vec::with_capacity(4 + json.len());
    frame.extend_from_slice(&len.to_be_bytes());
    frame.extend_from_slice(&json);
    frame
}

pub fn decode(frame: &[u8]) -> Result<AipMessage, SchemaViolation> {
    let Some((len, payload)) = frame.split_first_chunk::<4>() else {
        return Err(SchemaViolation::new(
            "frame",
            "shorter than the length prefix",
        ));
    };
    let len = u32::from_be_bytes(*len) as usize;
    if payload.len() != len {
        return Err(SchemaViolation::new(
            "frame",
            format!("length prefix {len} but {} payload bytes", payload.len()),
        ));
    }
    let value: Value = serde_json::from_slice(payload)
        .map_err(|e| SchemaViolation::new("frame", format!("invalid JSON: {e}")))?;
    from_json(value)
}

fn take_str(obj: &mut Map<String, Value>, key: &str) -> Result<String, SchemaViolation> {
    match obj.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(SchemaViolation::new(key, "expected a string")),
        None => Err(SchemaViolation::new(key, "missing")),
    }
}

/// Maps serde's messages onto the offending field where possible.
fn serde_violation(e: serde_json::Error) -> SchemaViolation {
    let msg = e.to_string();
    for prefix in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.strip_prefix(prefix) {
            if let Some(end) = rest.find('`') {
                let reason = if prefix.starts_with("missing") {
                    "missing"
                } else {
                    "unknown field"
                };
                return SchemaViolation::new(&rest[..end], reason);
            }
        }
    }
    SchemaViolation::new("body", msg)
}

fn parse_body<T: DeserializeOwned>(obj: Map<String, Value>) -> Result<T, SchemaViolation> {
    serde_json::from_value(Value::Object(obj)).map_err(serde_violation)
}

fn non_empty(field: &str, value: &str) -> Result<(), SchemaViolation> {
    if value.trim().is_empty() {
        Err(SchemaViolation::new(field, "must not be empty"))
    } else {
        Ok(())
    }
}

/// Parses and validates an unframed JSON message.
pub fn from_json(value: Value) -> Result<AipMessage, SchemaViolation> {
    let Value::Object(mut obj) = value else {
        return Err(SchemaViolation::new("message", "expected a JSON object"));
    };
    let type_name = take_str(&mut obj, "msg_type")?;
    let msg_type = MsgType::parse(&type_name)
        .ok_or_else(|| SchemaViolation::new("msg_type", format!("unknown type `{type_name}`")))?;
    let direction: Direction = match obj.remove("direction") {
        Some(v) => serde_json::from_value(v)
            .map_err(|_| SchemaViolation::new("direction", "unknown direction"))?,
        None => return Err(SchemaViolation::new("direction", "missing")),
    };
    let canonical = msg_type.direction();
    if canonical != Direction::Bidirectional && direction != canonical {
        return Err(SchemaViolation::new(
            "direction",
            format!("{msg_type} must travel {canonical:?}"),
        ));
    }
    let seq = match obj.remove("seq") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| SchemaViolation::new("seq", "expected a non-negative integer"))?,
        None => return Err(SchemaViolation::new("seq", "missing")),
    };
    let session_id = match obj.remove("session_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(SchemaViolation::new("session_id", "expected a string")),
    };

    let body = match msg_type {
        MsgType::Register => {
            let b: RegisterBody = parse_body(obj)?;
            non_empty("client_id", &b.client_id)?;
            MessageBody::Register(b)
        }
        MsgType::Task => {
            let b: TaskBody = parse_body(obj)?;
            non_empty("request.task_id", &b.request.task_id)?;
            if session_id.as_deref().is_none_or(str::is_empty) {
                return Err(SchemaViolation::new(
                    "session_id",
                    "TASK requires a session",
                ));
            }
            MessageBody::Task(b)
        }
        MsgType::Command => {
            let b: CommandBody = parse_body(obj)?;
            non_empty("response_id", &b.response_id)?;
            for (i, a) in b.actions.iter().enumerate() {
                non_empty(&format!("actions[{i}].id"), &a.id)?;
                non_empty(&format!("actions[{i}].function"), &a.function)?;
            }
            MessageBody::Command(b)
        }
        MsgType::CommandResults => {
            let b: CommandResultsBody = parse_body(obj)?;
            non_empty("prev_response_id", &b.prev_response_id)?;
            MessageBody::CommandResults(b)
        }
        MsgType::TaskEnd => MessageBody::TaskEnd(parse_body(obj)?),
        MsgType::Heartbeat => MessageBody::Heartbeat(parse_body(obj)?),
        MsgType::DeviceInfoRequest => {
            let b: DeviceInfoRequestBody = parse_body(obj)?;
            non_empty("target_id", &b.target_id)?;
            non_empty("request_id", &b.request_id)?;
            MessageBody::DeviceInfoRequest(b)
        }
        MsgType::DeviceInfoResponse => {
            let b: DeviceInfoResponseBody = parse_body(obj)?;
            non_empty("response_id", &b.response_id)?;
            MessageBody::DeviceInfoResponse(b)
        }
        MsgType::Error => MessageBody::Error(parse_body(obj)?),
    };
    Ok(AipMessage {
        direction,
        seq,
        session_id,
        body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn heartbeat_round_trip() {
        let m = AipMessage::heartbeat(SimTime::from_secs(5.0), Direction::ServerToClient);
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn command_batch_keeps_order() {
        let m = AipMessage::new(MessageBody::Command(CommandBody {
            actions: vec![
                Command::new("c1", "SYS_INFO"),
                Command::new("c2", "EXEC_CLI").arg("command", "echo hi"),
            ],
            response_id: "r1".into(),
        }))
        .with_session("s1");
        let back = decode(&encode(&m)).unwrap();
        let MessageBody::Command(b) = &back.body else {
            panic!()
        };
        assert_eq!(b.actions[0].id, "c1");
        assert_eq!(b.actions[1].id, "c2");
        assert_eq!(back, m);
    }

    #[test]
    fn missing_prev_response_id_is_rejected() {
        let v = json!({
            "msg_type": "COMMAND_RESULTS", "direction": "CLIENT_TO_SERVER", "seq": 1,
            "action_results": []
        });
        assert_eq!(
            from_json(v).unwrap_err(),
            SchemaViolation::new("prev_response_id", "missing")
        );
    }

    #[test]
    fn unknown_type_and_unknown_field_are_rejected() {
        let v = json!({"msg_type": "PING", "direction": "CLIENT_TO_SERVER", "seq": 0});
        assert_eq!(from_json(v).unwrap_err().field, "msg_type");
        let v = json!({
            "msg_type": "HEARTBEAT", "direction": "CLIENT_TO_SERVER", "seq": 0,
            "timestamp": 1.0, "extra": true
        });
        assert_eq!(
            from_json(v).unwrap_err(),
            SchemaViolation::new("extra", "unknown field")
        );
    }

    #[test]
    fn empty_register_client_is_rejected() {
        let m = AipMessage::register("", json!({}));
        assert_eq!(decode(&encode(&m)).unwrap_err().field, "client_id");
    }

    #[test]
    fn wrong_direction_is_rejected() {
        let m = AipMessage::new(MessageBody::TaskEnd(TaskEndBody {
            status: TaskEndStatus::Completed,
            result: None,
            error: None,
        }))
        .with_direction(Direction::ClientToServer);
        assert_eq!(decode(&encode(&m)).unwrap_err().field, "direction");
    }

    #[test]
    fn truncated_frame_is_rejected() {
        let m = AipMessage::heartbeat(SimTime::ZERO, Direction::ClientToServer);
        let frame = encode(&m);
        assert_eq!(
            decode(&frame[..frame.len() - 1]).unwrap_err().field,
            "frame"
        );
        assert_eq!(decode(&[0, 0]).unwrap_err().field, "frame");
    }

    #[test]
    fn idempotency_classes() {
        assert_eq!(MsgType::Command.idempotency(), Idempotency::No);
        assert_eq!(MsgType::Task.idempotency(), Idempotency::Limited);
        assert_eq!(MsgType::Heartbeat.idempotency(), Idempotency::Yes);
    }
}
