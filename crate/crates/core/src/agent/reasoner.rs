//! The reasoning strategy. A scripted reasoner replays per-task step lists
//! keyed by task-id globs; `{{inputs}}` in any string argument is replaced
//! with a rendering of the task's upstream outcomes.

use std::collections::BTreeMap;

use glob::Pattern;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{AgentFsmState, AgentMemory};
use crate::aip::message::{Command, TaskRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerOutput {
    pub thought: String,
    pub commands: Vec<Command>,
    pub next_state: AgentFsmState,
    /// Overrides the default result summary when the task finishes.
    pub result: Option<Value>,
    /// Turn a round with any failed action into `FAIL`.
    pub fail_on_error: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReasonerError {
    #[error("no reasoner rule for task `{0}`")]
    NoRule(String),
    #[error("reasoner script for `{task}` has no step {step}")]
    Exhausted { task: String, step: usize },
    #[error("invalid reasoner script: {0}")]
    InvalidScript(String),
}

pub trait Reasoner {
    /// `step` counts completed rounds of this task.
    fn propose(
        &mut self,
        task: &TaskRequest,
        step: usize,
        memory: &AgentMemory,
    ) -> Result<ReasonerOutput, ReasonerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedCommand {
    /// Defaults to `<task>-<step>-<index>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub function: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, Value>,
}

fn finish() -> AgentFsmState {
    AgentFsmState::Finish
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedStep {
    #[serde(default)]
    pub thought: String,
    #[serde(default)]
    pub commands: Vec<ScriptedCommand>,
    #[serde(default = "finish")]
    pub next_state: AgentFsmState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default)]
    pub fail_on_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonerRule {
    pub task: String,
    pub steps: Vec<ScriptedStep>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonerScript {
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub rules: Vec<ReasonerRule>,
}

#[derive(Debug, Clone)]
pub struct ScriptedReasoner {
    strict: bool,
    rules: Vec<(Pattern, ReasonerRule)>,
}

impl ScriptedReasoner {
    pub fn new(script: ReasonerScript) -> Result<Self, ReasonerError> {
        let rules = script
            .rules
            .into_iter()
            .map(|r| {
                Pattern::new(&r.task)
                    .map(|p| (p, r.clone()))
                    .map_err(|e| ReasonerError::InvalidScript(format!("`{}`: {e}", r.task)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            strict: script.strict,
            rules,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ReasonerError> {
        let script: ReasonerScript =
            serde_json::from_str(text).map_err(|e| ReasonerError::InvalidScript(e.to_string()))?;
        Self::new(script)
    }
}

impl Reasoner for ScriptedReasoner {
    fn propose(
        &mut self,
        task: &TaskRequest,
        step: usize,
        _memory: &AgentMemory,
    ) -> Result<ReasonerOutput, ReasonerError> {
        let Some((_, rule)) = self.rules.iter().find(|(p, _)| p.matches(&task.task_id)) else {
            if self.strict {
                return Err(ReasonerError::NoRule(task.task_id.clone()));
            }
            return Ok(ReasonerOutput {
                thought: format!("no scripted steps for {}; nothing to do", task.task_id),
                commands: Vec::new(),
                next_state: AgentFsmState::Finish,
                result: None,
                fail_on_error: false,
            });
        };
        let s = rule
            .steps
            .get(step)
            .ok_or_else(|| ReasonerError::Exhausted {
                task: task.task_id.clone(),
                step,
            })?;
        let rendered = render_inputs(&task.inputs);
        let commands = s
            .commands
            .iter()
            .enumerate()
            .map(|(i, c)| Command {
                id: c
                    .id
                    .clone()
                    .unwrap_or_else(|| format!("{}-{step}-{i}", task.task_id)),
                function: c.function.clone(),
                arguments: c
                    .arguments
                    .iter()
                    .map(|(k, v)| (k.clone(), substitute(v, &rendered)))
                    .collect(),
            })
            .collect();
        Ok(ReasonerOutput {
            thought: s.thought.clone(),
            commands,
            next_state: s.next_state,
            result: s.result.clone(),
            fail_on_error: s.fail_on_error,
        })
    }
}

fn substitute(v: &Value, inputs: &str) -> Value {
    match v {
        Value::String(s) => Value::String(s.replace("{{inputs}}", inputs)),
        other => other.clone(),
    }
}

/// A task result as plain text: the `outputs` strings when present, else the
/// `summary`, else compact JSON.
pub fn render_result(result: &Value) -> String {
    if let Some(outs) = result.get("outputs").and_then(Value::as_array) {
        let parts: Vec<&str> = outs
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if !parts.is_empty() {
            return parts.join("; ");
        }
    }
    if let Some(s) = result.get("summary").and_then(Value::as_str) {
        return s.to_owned();
    }
    if let Some(s) = result.as_str() {
        return s.to_owned();
    }
    result.to_string()
}

/// One line per upstream outcome, e.g. `B COMPLETED: elapsed=30.0s` or
/// `A FAILED (AGENT_DISCONNECTED): device lost`.
pub fn render_inputs(inputs: &[Value]) -> String {
    inputs
        .iter()
        .map(|i| {
            let id = i.get("task_id").and_then(Value::as_str).unwrap_or("?");
            let status = i.get("status").and_then(Value::as_str).unwrap_or("?");
            let reason = i
                .get("failure_reason")
                .and_then(Value::as_str)
                .map(|r| format!(" ({r})"))
                .unwrap_or_default();
            let body = i.get("result").map(render_result).unwrap_or_default();
            format!("{id} {status}{reason}: {body}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
