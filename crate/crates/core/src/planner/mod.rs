//! The planning agent's contract. A planner turns a request into a
//! constellation (CREATE) and then reacts to batches of task outcomes with
//! edit deltas (EDIT), moving through START, CONTINUE and the two terminal
//! states FINISH and FAIL.
//!
//! The only implementation shipped is [`ScriptedPlanner`], which replays
//! canned outputs selected by trigger patterns. A model-backed planner would
//! implement [`Planner`] the same way: read the input, return an output and
//! the virtual time the call took.

mod script;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::aip::profile::AgentProfile;
use crate::constellation::{
    BuildConfig, ConstellationDocument, EdgeSpec, EditDelta, EditOp, TaskSpec,
};
use crate::orchestrator::event::OrchestratorEvent;
use crate::time::SimDuration;

pub use script::{
    load_script, load_script_file, EventPattern, PlannerScript, ScriptedPlanner, StatusRequirement,
    Trigger,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlannerState {
    Start,
    Continue,
    Finish,
    Fail,
}

impl PlannerState {
    pub fn is_terminal(self) -> bool {
        matches!(self, PlannerState::Finish | PlannerState::Fail)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PlannerState::Start => "START",
            PlannerState::Continue => "CONTINUE",
            PlannerState::Finish => "FINISH",
            PlannerState::Fail => "FAIL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal planner transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: PlannerState,
    pub to: PlannerState,
}

/// Moves along the planner state machine. Nothing leads back to START and
/// nothing leaves a terminal state.
pub fn fsm_advance(
    current: PlannerState,
    next: PlannerState,
) -> Result<PlannerState, IllegalTransition> {
    if current.is_terminal() || next == PlannerState::Start {
        return Err(IllegalTransition {
            from: current,
            to: next,
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlannerMode {
    Create,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerInput {
    pub mode: PlannerMode,
    pub request: String,
    #[serde(default)]
    pub profiles: Vec<AgentProfile>,
    /// Current constellation; EDIT only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<ConstellationDocument>,
    /// The batch of outcomes being reacted to; EDIT only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<OrchestratorEvent>,
    /// Worked examples for model-backed planners. Carried through untouched.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demonstrations: Vec<Value>,
    /// Why the previous delta for this batch was rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
}

impl PlannerInput {
    pub fn create(request: impl Into<String>, profiles: Vec<AgentProfile>) -> Self {
        Self {
            mode: PlannerMode::Create,
            request: request.into(),
            profiles,
            snapshot: None,
            events: Vec::new(),
            demonstrations: Vec::new(),
            rejection: None,
        }
    }

    pub fn edit(
        request: impl Into<String>,
        profiles: Vec<AgentProfile>,
        snapshot: ConstellationDocument,
        events: Vec<OrchestratorEvent>,
    ) -> Self {
        Self {
            mode: PlannerMode::Edit,
            request: request.into(),
            profiles,
            snapshot: Some(snapshot),
            events,
            demonstrations: Vec::new(),
            rejection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerOutput {
    pub observation: String,
    pub thought: String,
    pub next_state: PlannerState,
    pub result: String,
    #[serde(default)]
    pub delta: EditDelta,
}

/// An output plus the virtual time the call took.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerReply {
    pub output: PlannerOutput,
    pub latency: SimDuration,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("no trigger matches {mode:?} call with events [{events}]")]
    ScriptMiss { mode: PlannerMode, events: String },
    #[error("delta rejected twice: {0}")]
    InvalidDelta(String),
    #[error("planner left terminal state: {0}")]
    IllegalTransition(#[from] IllegalTransition),
    #[error("script parse error: {0}")]
    Parse(String),
}

pub trait Planner {
    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerReply, PlannerError>;
}

/// A build op reproducing `doc`'s tasks and edges, all `PENDING`.
pub fn build_op_from(doc: &ConstellationDocument) -> EditOp {
    EditOp::BuildConstellation {
        config: BuildConfig {
            tasks: doc
                .tasks
                .iter()
                .map(|t| TaskSpec {
                    id: t.id.clone(),
                    name: t.name.clone(),
                    description: t.description.clone(),
                    tips: t.tips.clone(),
                    device: t.device.clone(),
                })
                .collect(),
            dependencies: doc
                .dependencies
                .iter()
                .map(|e| EdgeSpec {
                    id: e.id.clone(),
                    from_task: e.from_task.clone(),
                    to_task: e.to_task.clone(),
                    dep_type: e.dep_type.clone(),
                    description: e.description.clone(),
                })
                .collect(),
        },
        clear: true,
    }
}

/// Ids a delta mentions that exist neither in `snapshot` nor among the
/// delta's own additions (counted up to the op that mentions them).
pub fn dangling_references(
    snapshot: Option<&ConstellationDocument>,
    delta: &EditDelta,
) -> Vec<String> {
    let mut tasks: BTreeSet<String> = BTreeSet::new();
    let mut edges: BTreeSet<String> = BTreeSet::new();
    if let Some(doc) = snapshot {
        tasks.extend(doc.tasks.iter().map(|t| t.id.to_string()));
        edges.extend(doc.dependencies.iter().map(|e| e.id.to_string()));
    }
    let mut dangling = Vec::new();
    let mut need = |set: &BTreeSet<String>, id: &str| {
        if !set.contains(id) {
            dangling.push(id.to_owned());
        }
    };
    for op in &delta.ops {
        match op {
            EditOp::AddTask { task } => {
                tasks.insert(task.id.to_string());
            }
            EditOp::RemoveTask { id } | EditOp::UpdateTask { id, .. } => need(&tasks, id.as_str()),
            EditOp::AddDependency { dependency } => {
                need(&tasks, dependency.from_task.as_str());
                need(&tasks, dependency.to_task.as_str());
                edges.insert(dependency.id.to_string());
            }
            EditOp::RemoveDependency { id } | EditOp::UpdateDependency { id, .. } => {
                need(&edges, id.as_str())
            }
            EditOp::BuildConstellation { config, clear } => {
                if *clear {
                    tasks.clear();
                    edges.clear();
                }
                tasks.extend(config.tasks.iter().map(|t| t.id.to_string()));
                for e in &config.dependencies {
                    need(&tasks, e.from_task.as_str());
                    need(&tasks, e.to_task.as_str());
                    edges.insert(e.id.to_string());
                }
            }
        }
    }
    dangling
}
