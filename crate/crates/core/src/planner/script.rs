//! Scripted planner. A script is an ordered list of triggers; each call runs
//! the first trigger whose mode, event patterns and status requirements all
//! hold, and returns its canned output.
//!
//! Event patterns are matched as a multiset: every pattern must claim a
//! distinct event of its kind whose task id matches its glob. Unless `exact`
//! is set the batch may hold further events.

use std::path::Path;

use glob::Pattern;
use serde::{Deserialize, Serialize};

use super::{
    build_op_from, Planner, PlannerError, PlannerInput, PlannerMode, PlannerOutput, PlannerReply,
    PlannerState,
};
use crate::constellation::{ConstellationDocument, EditDelta, EditOp, TaskStatus};
use crate::orchestrator::event::{EventKind, OrchestratorEvent};
use crate::time::SimDuration;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventPattern {
    pub kind: EventKind,
    #[serde(default = "any")]
    pub task: String,
}

/// Every task whose id matches `task` has `status`, and at least one does.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusRequirement {
    pub task: String,
    pub status: TaskStatus,
}

fn any() -> String {
    "*".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    #[serde(default)]
    pub name: String,
    pub mode: PlannerMode,
    /// Glob on the request text; CREATE triggers usually set it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
    #[serde(default)]
    pub events: Vec<EventPattern>,
    #[serde(default)]
    pub exact: bool,
    #[serde(default)]
    pub requires: Vec<StatusRequirement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_fires: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
    /// Constellation document whose tasks and edges become a leading build
    /// op. Relative paths resolve against the script file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build_from: Option<String>,
    pub output: PlannerOutput,
}

fn default_latency() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerScript {
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_latency")]
    pub latency_s: f64,
    #[serde(default)]
    pub triggers: Vec<Trigger>,
}

impl Default for PlannerScript {
    fn default() -> Self {
        Self {
            strict: false,
            latency_s: default_latency(),
            triggers: Vec::new(),
        }
    }
}

struct Compiled {
    trigger: Trigger,
    request: Option<Pattern>,
    events: Vec<(EventKind, Pattern)>,
    requires: Vec<(Pattern, TaskStatus)>,
    fires: u32,
}

fn pattern(p: &str) -> Result<Pattern, PlannerError> {
    Pattern::new(p).map_err(|e| PlannerError::Parse(format!("pattern `{p}`: {e}")))
}

/// Parses a script. An empty document yields the empty non-strict script.
pub fn load_script(text: &str) -> Result<PlannerScript, PlannerError> {
    if text.trim().is_empty() {
        return Ok(PlannerScript::default());
    }
    let script: PlannerScript =
        serde_json::from_str(text).map_err(|e| PlannerError::Parse(e.to_string()))?;
    ScriptedPlanner::new(script.clone())?;
    Ok(script)
}

/// Loads a script file and inlines every `build_from` fixture.
pub fn load_script_file(path: &Path) -> Result<PlannerScript, PlannerError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PlannerError::Parse(format!("{}: {e}", path.display())))?;
    let mut script = load_script(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for t in &mut script.triggers {
        if let Some(rel) = t.build_from.take() {
            let fixture = base.join(&rel);
            let doc_text = std::fs::read_to_string(&fixture)
                .map_err(|e| PlannerError::Parse(format!("{}: {e}", fixture.display())))?;
            let doc: ConstellationDocument = serde_json::from_str(&doc_text)
                .map_err(|e| PlannerError::Parse(format!("{rel}: {e}")))?;
            t.output.delta.ops.insert(0, build_op_from(&doc));
        }
    }
    Ok(script)
}

pub struct ScriptedPlanner {
    strict: bool,
    latency: SimDuration,
    triggers: Vec<Compiled>,
}

impl ScriptedPlanner {
    pub fn new(script: PlannerScript) -> Result<Self, PlannerError> {
        let mut triggers = Vec::with_capacity(script.triggers.len());
        for t in script.triggers {
            if t.mode == PlannerMode::Create {
                let creates_only = t.output.delta.ops.iter().all(|op| {
                    matches!(
                        op,
                        EditOp::BuildConstellation { .. }
                            | EditOp::AddTask { .. }
                            | EditOp::AddDependency { .. }
                    )
                });
                if !creates_only {
                    return Err(PlannerError::Parse(format!(
                        "trigger `{}`: CREATE output may only build or add",
                        t.name
                    )));
                }
            }
            if t.build_from.is_some() && t.mode != PlannerMode::Create {
                return Err(PlannerError::Parse(format!(
                    "trigger `{}`: build_from needs CREATE",
                    t.name
                )));
            }
            triggers.push(Compiled {
                request: t.request.as_deref().map(pattern).transpose()?,
                events: t
                    .events
                    .iter()
                    .map(|e| Ok((e.kind, pattern(&e.task)?)))
                    .collect::<Result<_, PlannerError>>()?,
                requires: t
                    .requires
                    .iter()
                    .map(|r| Ok((pattern(&r.task)?, r.status)))
                    .collect::<Result<_, PlannerError>>()?,
                trigger: t,
                fires: 0,
            });
        }
        Ok(Self {
            strict: script.strict,
            latency: SimDuration::from_secs(script.latency_s),
            triggers,
        })
    }

    pub fn trigger_count(&self) -> usize {
        self.triggers.len()
    }

    /// How often each trigger fired, by name.
    pub fn fire_counts(&self) -> Vec<(String, u32)> {
        self.triggers
            .iter()
            .map(|c| (c.trigger.name.clone(), c.fires))
            .collect()
    }

    fn fallback(&self, input: &PlannerInput) -> PlannerOutput {
        let all_done = input
            .snapshot
            .as_ref()
            .is_some_and(|s| s.tasks.iter().all(|t| t.status == TaskStatus::Completed));
        let finish = match input.mode {
            PlannerMode::Create => input.request.trim().is_empty(),
            PlannerMode::Edit => all_done,
        };
        let next_state = if finish {
            PlannerState::Finish
        } else {
            PlannerState::Continue
        };
        PlannerOutput {
            observation: format!("{:?} call with {} event(s)", input.mode, input.events.len()),
            thought: "no scripted reaction; leaving the constellation unchanged".into(),
            next_state,
            result: if finish {
                "nothing left to do".into()
            } else {
                "no change".into()
            },
            delta: EditDelta::empty(),
        }
    }
}

fn matches_multiset(
    patterns: &[(EventKind, Pattern)],
    events: &[OrchestratorEvent],
    exact: bool,
) -> bool {
    if exact && patterns.len() != events.len() {
        return false;
    }
    fn go(
        patterns: &[(EventKind, Pattern)],
        events: &[OrchestratorEvent],
        used: &mut Vec<bool>,
    ) -> bool {
        let Some(((kind, glob), rest)) = patterns.split_first() else {
            return true;
        };
        for (i, e) in events.iter().enumerate() {
            let id = e.task_id.as_ref().map(|t| t.as_str()).unwrap_or("");
            if used[i] || e.kind != *kind || !glob.matches(id) {
                continue;
            }
            used[i] = true;
            if go(rest, events, used) {
                return true;
            }
            used[i] = false;
        }
        false
    }
    go(patterns, events, &mut vec![false; events.len()])
}

fn requirements_hold(
    requires: &[(Pattern, TaskStatus)],
    snapshot: Option<&ConstellationDocument>,
) -> bool {
    requires.iter().all(|(glob, status)| {
        let Some(doc) = snapshot else {
            return false;
        };
        let mut matched = doc
            .tasks
            .iter()
            .filter(|t| glob.matches(t.id.as_str()))
            .peekable();
        matched.peek().is_some() && matched.all(|t| t.status == *status)
    })
}

impl Planner for ScriptedPlanner {
    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerReply, PlannerError> {
        let hit = self.triggers.iter_mut().find(|c| {
            c.trigger.mode == input.mode
                && c.trigger.max_fires.is_none_or(|m| c.fires < m)
                && c.request.as_ref().is_none_or(|p| p.matches(&input.request))
                && matches_multiset(&c.events, &input.events, c.trigger.exact)
                && requirements_hold(&c.requires, input.snapshot.as_ref())
        });
        if let Some(c) = hit {
            c.fires += 1;
            let latency = c
                .trigger
                .latency_s
                .map(SimDuration::from_secs)
                .unwrap_or(self.latency);
            return Ok(PlannerReply {
                output: c.trigger.output.clone(),
                latency,
            });
        }
        if self.strict {
            return Err(PlannerError::ScriptMiss {
                mode: input.mode,
                events: input
                    .events
                    .iter()
                    .map(|e| {
                        format!(
                            "{}({})",
                            e.kind,
                            e.task_id.as_ref().map(|t| t.as_str()).unwrap_or("-")
                        )
                    })
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        Ok(PlannerReply {
            output: self.fallback(input),
            latency: self.latency,
        })
    }
}
