//! The task constellation: a mutable DAG of tasks ([`TaskStar`]) joined by
//! typed dependency edges ([`TaskStarLine`]).
//!
//! All mutation goes through [`EditDelta`]s, which commit atomically and bump
//! the constellation version exactly once. Iteration order everywhere is
//! id-lexicographic, so two constellations built from the same edits are
//! indistinguishable, including under canonical serialization.

mod delta;
mod document;
mod ready;
mod validate;

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use delta::{
    BuildConfig, DeltaSummary, EdgePatch, EdgeSpec, EditDelta, EditOp, TaskPatch, TaskSpec,
};
pub use document::{canonical_json, ConstellationDocument, DOCUMENT_SCHEMA_ID};
pub use ready::{ConditionPredicate, ConditionRegistry};
pub use validate::Violation;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a task, unique within one constellation.
    TaskId
);
string_id!(
    /// Identifier of a dependency edge.
    EdgeId
);
string_id!(
    /// Identifier of a device agent.
    DeviceId
);

/// Execution status of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStatus {
    Pending,
    Running,
    Completed,
    Failed,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Completed | TaskStatus::Failed)
    }

    /// Legal lifecycle edges. `Pending -> Failed` exists for planner
    /// cancellation and dispatch-side failure policies.
    pub fn can_transition_to(self, next: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!(
            (self, next),
            (Pending, Running) | (Running, Completed) | (Running, Failed) | (Pending, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Pending => "PENDING",
            TaskStatus::Running => "RUNNING",
            TaskStatus::Completed => "COMPLETED",
            TaskStatus::Failed => "FAILED",
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a task ended in `FAILED`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureReason {
    ExecutionError,
    DependencyUnsatisfied,
    AgentDisconnected,
    Timeout,
    PlannerCancelled,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::ExecutionError => "EXECUTION_ERROR",
            FailureReason::DependencyUnsatisfied => "DEPENDENCY_UNSATISFIED",
            FailureReason::AgentDisconnected => "AGENT_DISCONNECTED",
            FailureReason::Timeout => "TIMEOUT",
            FailureReason::PlannerCancelled => "PLANNER_CANCELLED",
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The atomic unit of work, executed by exactly one device agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskStar {
    pub id: TaskId,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub tips: Vec<String>,
    pub device: DeviceId,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<FailureReason>,
}

/// How an edge gates its downstream task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DependencyType {
    /// Satisfied once the upstream task is terminal, whatever the outcome.
    Unconditional,
    /// Satisfied only when the upstream task completed.
    SuccessOnly,
    /// Satisfied when the upstream is terminal and the named predicate holds
    /// for its result.
    Conditional { condition_id: String },
}

/// A directed dependency edge `from_task -> to_task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskStarLine {
    pub id: EdgeId,
    pub from_task: TaskId,
    pub to_task: TaskId,
    pub dep_type: DependencyType,
    #[serde(default)]
    pub description: String,
}

/// Errors raised by constellation edits and (de)serialization.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstellationError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("`{0}` not found")]
    NotFound(String),
    #[error("task `{id}` is {status} and cannot be edited")]
    ImmutableTask { id: TaskId, status: TaskStatus },
    #[error("field `{0}` cannot be patched")]
    IllegalField(String),
    #[error("edit would introduce a cycle through {0:?}")]
    CycleIntroduced(Vec<TaskId>),
    #[error("an edge {from} -> {to} already exists")]
    DuplicateEdge { from: TaskId, to: TaskId },
    #[error("validation failed: {0:?}")]
    ValidationFailed(Vec<Violation>),
    #[error("no evaluator registered for condition `{0}`")]
    UnknownCondition(String),
    #[error("illegal status transition for `{id}`: {from} -> {to}")]
    IllegalTransition {
        id: TaskId,
        from: TaskStatus,
        to: TaskStatus,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = ConstellationError> = std::result::Result<T, E>;

/// A task DAG plus its version counter and originating request.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskConstellation {
    request: String,
    version: u64,
    tasks: BTreeMap<TaskId, TaskStar>,
    edges: BTreeMap<EdgeId, TaskStarLine>,
}

impl TaskConstellation {
    pub fn new(request: impl Into<String>) -> Self {
        Self {
            request: request.into(),
            ..Self::default()
        }
    }

    pub fn request(&self) -> &str {
        &self.request
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tasks(&self) -> &BTreeMap<TaskId, TaskStar> {
        &self.tasks
    }

    pub fn edges(&self) -> &BTreeMap<EdgeId, TaskStarLine> {
        &self.edges
    }

    pub fn task(&self, id: &str) -> Option<&TaskStar> {
        self.tasks.get(id)
    }

    pub fn edge(&self, id: &str) -> Option<&TaskStarLine> {
        self.edges.get(id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn status(&self, id: &str) -> Option<TaskStatus> {
        self.tasks.get(id).map(|t| t.status)
    }

    /// Ids of the edges pointing into `id`; the derived `dependencies` field.
    pub fn dependencies(&self, id: &str) -> Vec<EdgeId> {
        self.incoming(id).map(|e| e.id.clone()).collect()
    }

    pub fn incoming<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a TaskStarLine> + 'a {
        self.edges
            .values()
            .filter(move |e| e.to_task.as_str() == id)
    }

    pub fn outgoing<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a TaskStarLine> + 'a {
        self.edges
            .values()
            .filter(move |e| e.from_task.as_str() == id)
    }

    pub fn find_edge(&self, from: &str, to: &str) -> Option<&TaskStarLine> {
        self.edges
            .values()
            .find(|e| e.from_task.as_str() == from && e.to_task.as_str() == to)
    }

    pub fn ids_with_status(&self, status: TaskStatus) -> BTreeSet<TaskId> {
        self.tasks
            .values()
            .filter(|t| t.status == status)
            .map(|t| t.id.clone())
            .collect()
    }

    pub fn running(&self) -> BTreeSet<TaskId> {
        self.ids_with_status(TaskStatus::Running)
    }

    /// Orchestrator-driven status change. Only legal lifecycle edges are
    /// accepted; the graph shape is never touched and the version is not
    /// bumped (status folding is not an edit).
    pub fn transition(
        &mut self,
        id: &str,
        to: TaskStatus,
        result: Option<Value>,
        failure_reason: Option<FailureReason>,
    ) -> Result<()> {
        let task = self
            .tasks
            .get_mut(id)
            .ok_or_else(|| ConstellationError::NotFound(id.to_owned()))?;
        if !task.status.can_transition_to(to) {
            return Err(ConstellationError::IllegalTransition {
                id: task.id.clone(),
                from: task.status,
                to,
            });
        }
        task.status = to;
        if to.is_terminal() {
            task.result = result;
            task.failure_reason = if to == TaskStatus::Failed {
                Some(failure_reason.unwrap_or(FailureReason::ExecutionError))
            } else {
                None
            };
        }
        Ok(())
    }

    /// Monotone, idempotent join of a terminal outcome into the task's status.
    ///
    /// Folding the same terminal status twice is a no-op; folding into a
    /// `PENDING` or `RUNNING` task moves it to the terminal status. A
    /// conflicting terminal status is reported and ignored.
    pub fn fold_outcome(
        &mut self,
        id: &str,
        status: TaskStatus,
        result: Option<Value>,
        failure_reason: Option<FailureReason>,
    ) -> Result<bool> {
        debug_assert!(status.is_terminal());
        let current = self
            .status(id)
            .ok_or_else(|| ConstellationError::NotFound(id.to_owned()))?;
        if current == status {
            return Ok(false);
        }
        if current.is_terminal() {
            return Err(ConstellationError::IllegalTransition {
                id: TaskId::new(id),
                from: current,
                to: status,
            });
        }
        self.transition(id, status, result, failure_reason)?;
        Ok(true)
    }

    /// Pure check of every structural and coherence invariant.
    pub fn validate(&self) -> Vec<Violation> {
        validate::validate(self)
    }

    /// Tasks in a topological order (ties broken by id), or `None` if cyclic.
    pub fn topological_order(&self) -> Option<Vec<TaskId>> {
        validate::topological_order(self)
    }

    // Single-op helpers. Each commits as its own one-op delta.

    pub fn add_task(&mut self, spec: TaskSpec) -> Result<DeltaSummary> {
        self.apply_delta(&EditDelta::single(EditOp::AddTask { task: spec }))
    }

    pub fn remove_task(&mut self, id: &str) -> Result<DeltaSummary> {
        self.apply_delta(&EditDelta::single(EditOp::RemoveTask { id: id.into() }))
    }

    pub fn update_task(&mut self, id: &str, patch: TaskPatch) -> Result<DeltaSummary> {
        self.apply_delta(&EditDelta::single(EditOp::UpdateTask {
            id: id.into(),
            patch,
        }))
    }

    pub fn add_dependency(&mut self, spec: EdgeSpec) -> Result<DeltaSummary> {
        self.apply_delta(&EditDelta::single(EditOp::AddDependency {
            dependency: spec,
        }))
    }

    pub fn remove_dependency(&mut self, id: &str) -> Result<DeltaSummary> {
        self.apply_delta(&EditDelta::single(EditOp::RemoveDependency {
            id: id.into(),
        }))
    }

    pub fn update_dependency(&mut self, id: &str, patch: EdgePatch) -> Result<DeltaSummary> {
        self.apply_delta(&EditDelta::single(EditOp::UpdateDependency {
            id: id.into(),
            patch,
        }))
    }

    /// Builds a fresh constellation from a batch config; version 1 on success.
    pub fn build(request: impl Into<String>, config: BuildConfig) -> Result<Self> {
        let mut c = Self::new(request);
        c.apply_delta(&EditDelta::single(EditOp::BuildConstellation {
            config,
            clear: true,
        }))?;
        Ok(c)
    }

    /// Applies every op of `delta` in order, atomically.
    ///
    /// On success the version increases by exactly one. On any error the
    /// constellation is left untouched.
    pub fn apply_delta(&mut self, delta: &EditDelta) -> Result<DeltaSummary> {
        let (next, summary) = delta::apply(self, delta)?;
        *self = next;
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_transitions_follow_lifecycle() {
        use TaskStatus::*;
        assert!(Pending.can_transition_to(Running));
        assert!(Running.can_transition_to(Completed));
        assert!(Running.can_transition_to(Failed));
        assert!(Pending.can_transition_to(Failed));
        for terminal in [Completed, Failed] {
            for next in [Pending, Running, Completed, Failed] {
                assert!(!terminal.can_transition_to(next));
            }
        }
        assert!(!Pending.can_transition_to(Completed));
        assert!(!Running.can_transition_to(Pending));
    }

    #[test]
    fn fold_is_idempotent_and_rejects_conflicts() {
        let mut c = TaskConstellation::new("r");
        c.add_task(TaskSpec::new("A", "linux1")).unwrap();
        c.transition("A", TaskStatus::Running, None, None).unwrap();
        assert!(c
            .fold_outcome("A", TaskStatus::Completed, Some(Value::from(1)), None)
            .unwrap());
        let snapshot = c.clone();
        assert!(!c
            .fold_outcome("A", TaskStatus::Completed, Some(Value::from(1)), None)
            .unwrap());
        assert_eq!(c, snapshot);
        assert!(matches!(
            c.fold_outcome("A", TaskStatus::Failed, None, None),
            Err(ConstellationError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn failed_transition_defaults_reason() {
        let mut c = TaskConstellation::new("r");
        c.add_task(TaskSpec::new("A", "d")).unwrap();
        c.transition("A", TaskStatus::Failed, None, None).unwrap();
        assert_eq!(
            c.task("A").unwrap().failure_reason,
            Some(FailureReason::ExecutionError)
        );
    }
}
