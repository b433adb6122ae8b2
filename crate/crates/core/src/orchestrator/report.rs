use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::event::OrchestratorEvent;
use super::sync::SyncIssue;
use crate::constellation::{ConstellationDocument, DeltaSummary, DeviceId, EditDelta, TaskId};
use crate::planner::{PlannerMode, PlannerState};
use crate::time::{SimDuration, SimTime};

pub const REPORT_SCHEMA_ID: &str = "run-report/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunOutcome {
    Success,
    Partial,
    Failed,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Success => "SUCCESS",
            RunOutcome::Partial => "PARTIAL",
            RunOutcome::Failed => "FAILED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub device: DeviceId,
    pub start: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<SimDuration>,
    pub dispatches: u32,
    /// Upstream task ids handed to the task, with their statuses.
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchedEvent {
    pub kind: String,
    pub task_id: Option<TaskId>,
}

/// One planner call inside a locked phase and what came of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCycleRecord {
    pub index: usize,
    pub started_at: SimTime,
    pub ended_at: SimTime,
    pub batch: Vec<BatchedEvent>,
    /// Outcomes that arrived while the planner was thinking.
    pub arrivals_during_call: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<EditDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<DeltaSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
    pub planner_state: PlannerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerTraceEntry {
    pub at: SimTime,
    pub mode: PlannerMode,
    pub events: usize,
    pub observation: String,
    pub thought: String,
    pub next_state: PlannerState,
    pub result: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
}

/// Counters for every safety property the engine audits while it runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub single_assignment_violations: usize,
    pub acyclicity_violations: usize,
    pub locality_violations: usize,
    pub assignments_while_held: usize,
    pub dispatch_version_mismatches: usize,
    /// RUNNING tasks whose device was lost, at termination.
    pub disconnected_running: usize,
    /// Queue-plus-in-flight sizes per queue-consuming step, one list per
    /// locked phase.
    pub phi_traces: Vec<Vec<usize>>,
    pub dropped_late_outcomes: usize,
    pub sync_issues: Vec<SyncIssue>,
    pub details: Vec<String>,
}

impl InvariantReport {
    pub fn violations(&self) -> usize {
        self.single_assignment_violations
            + self.acyclicity_violations
            + self.locality_violations
            + self.assignments_while_held
            + self.dispatch_version_mismatches
            + self.disconnected_running
    }

    /// Whether Φ fell strictly at every step of every locked phase.
    pub fn phi_strictly_decreasing(&self) -> bool {
        self.phi_traces
            .iter()
            .all(|t| t.windows(2).all(|w| w[1] < w[0]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub request: String,
    pub outcome: RunOutcome,
    pub planner_state: PlannerState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<ConstellationDocument>,
    #[serde(rename = "final")]
    pub final_constellation: ConstellationDocument,
    pub timings: BTreeMap<TaskId, TaskTiming>,
    pub events: Vec<OrchestratorEvent>,
    pub edit_cycles: Vec<EditCycleRecord>,
    pub planner_trace: Vec<PlannerTraceEntry>,
    pub makespan: SimDuration,
    /// Virtual time spent inside planner calls.
    pub planning_time: SimDuration,
    pub invariants: InvariantReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn count_events(&self, kind: super::event::EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn dispatches_of(&self, task: &str) -> u32 {
        self.timings.get(task).map_or(0, |t| t.dispatches)
    }
}
