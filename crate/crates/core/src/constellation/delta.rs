use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::validate::{self, Violation};
use super::{
    ConstellationError, DependencyType, DeviceId, EdgeId, Result, TaskConstellation, TaskId,
    TaskStar, TaskStarLine, TaskStatus,
};

/// Fields a planner supplies when creating a task. Status always starts at
/// `PENDING`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub tips: Vec<String>,
    pub device: DeviceId,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, device: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            name: id.clone(),
            id: TaskId::new(id),
            description: String::new(),
            tips: Vec::new(),
            device: DeviceId::new(device),
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_tips<I, S>(mut self, tips: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tips = tips.into_iter().map(Into::into).collect();
        self
    }

    fn into_task(self) -> TaskStar {
        TaskStar {
            id: self.id,
            name: self.name,
            description: self.description,
            tips: self.tips,
            device: self.device,
            status: TaskStatus::Pending,
            result: None,
            failure_reason: None,
        }
    }
}

/// Fields a planner supplies when creating an edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub id: EdgeId,
    pub from_task: TaskId,
    pub to_task: TaskId,
    #[serde(default = "unconditional")]
    pub dep_type: DependencyType,
    #[serde(default)]
    pub description: String,
}

fn unconditional() -> DependencyType {
    DependencyType::Unconditional
}

impl EdgeSpec {
    pub fn new(id: impl Into<String>, from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            id: EdgeId::new(id),
            from_task: TaskId::new(from),
            to_task: TaskId::new(to),
            dep_type: DependencyType::Unconditional,
            description: String::new(),
        }
    }

    pub fn with_type(mut self, dep_type: DependencyType) -> Self {
        self.dep_type = dep_type;
        self
    }

    fn into_edge(self) -> TaskStarLine {
        TaskStarLine {
            id: self.id,
            from_task: self.from_task,
            to_task: self.to_task,
            dep_type: self.dep_type,
            description: self.description,
        }
    }
}

/// Replacement values for the editable task fields. Any other key present in
/// the patch document is rejected with `IllegalField`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tips: Option<Vec<String>>,
    #[serde(flatten)]
    pub other: BTreeMap<String, Value>,
}

/// Replacement values for an edge's condition and description.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgePatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_type: Option<DependencyType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(flatten)]
    pub other: BTreeMap<String, Value>,
}

/// Batch input for `build_constellation`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub dependencies: Vec<EdgeSpec>,
}

/// One edit tool call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    AddTask {
        task: TaskSpec,
    },
    RemoveTask {
        id: TaskId,
    },
    UpdateTask {
        id: TaskId,
        patch: TaskPatch,
    },
    AddDependency {
        dependency: EdgeSpec,
    },
    RemoveDependency {
        id: EdgeId,
    },
    UpdateDependency {
        id: EdgeId,
        patch: EdgePatch,
    },
    BuildConstellation {
        config: BuildConfig,
        #[serde(default)]
        clear: bool,
    },
}

/// An ordered batch of edits that commits atomically.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditDelta {
    #[serde(default)]
    pub ops: Vec<EditOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl EditDelta {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(op: EditOp) -> Self {
        Self {
            ops: vec![op],
            provenance: None,
        }
    }

    pub fn new(ops: Vec<EditOp>) -> Self {
        Self {
            ops,
            provenance: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// What a committed delta changed, by the six edit categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub version: u64,
    pub added_tasks: usize,
    pub removed_tasks: usize,
    pub modified_tasks: usize,
    pub added_dependencies: usize,
    pub removed_dependencies: usize,
    pub modified_dependencies: usize,
}

impl DeltaSummary {
    pub fn total_changes(&self) -> usize {
        self.added_tasks
            + self.removed_tasks
            + self.modified_tasks
            + self.added_dependencies
            + self.removed_dependencies
            + self.modified_dependencies
    }

    pub fn accumulate(&mut self, other: &DeltaSummary) {
        self.added_tasks += other.added_tasks;
        self.removed_tasks += other.removed_tasks;
        self.modified_tasks += other.modified_tasks;
        self.added_dependencies += other.added_dependencies;
        self.removed_dependencies += other.removed_dependencies;
        self.modified_dependencies += other.modified_dependencies;
    }
}

/// Applies `delta` to a copy of `pre`, checking edit locality against `pre`.
pub(super) fn apply(
    pre: &TaskConstellation,
    delta: &EditDelta,
) -> Result<(TaskConstellation, DeltaSummary)> {
    let mut work = Working {
        pre,
        next: pre.clone(),
        summary: DeltaSummary::default(),
    };
    for op in &delta.ops {
        work.apply_op(op)?;
    }
    let violations = validate::validate(&work.next);
    if !violations.is_empty() {
        return Err(ConstellationError::ValidationFailed(violations));
    }
    work.next.version = pre.version + 1;
    work.summary.version = work.next.version;
    Ok((work.next, work.summary))
}

struct Working<'a> {
    pre: &'a TaskConstellation,
    next: TaskConstellation,
    summary: DeltaSummary,
}

impl Working<'_> {
    /// Status a task had before the delta started; tasks created by the delta
    /// count as `PENDING`.
    fn pre_status(&self, id: &TaskId) -> TaskStatus {
        self.pre.status(id.as_str()).unwrap_or(TaskStatus::Pending)
    }

    fn require_pending(&self, id: &TaskId) -> Result<()> {
        let status = self.pre_status(id);
        if status == TaskStatus::Pending {
            Ok(())
        } else {
            Err(ConstellationError::ImmutableTask {
                id: id.clone(),
                status,
            })
        }
    }

    fn require_task(&self, id: &TaskId) -> Result<()> {
        if self.next.tasks.contains_key(id) {
            Ok(())
        } else {
            Err(ConstellationError::NotFound(id.to_string()))
        }
    }

    fn apply_op(&mut self, op: &EditOp) -> Result<()> {
        match op {
            EditOp::AddTask { task } => {
                if self.next.tasks.contains_key(&task.id) {
                    return Err(ConstellationError::DuplicateId(task.id.to_string()));
                }
                self.next
                    .tasks
                    .insert(task.id.clone(), task.clone().into_task());
                self.summary.added_tasks += 1;
            }
            EditOp::RemoveTask { id } => {
                self.require_task(id)?;
                self.require_pending(id)?;
                let incident: Vec<EdgeId> = self
                    .next
                    .edges
                    .values()
                    .filter(|e| &e.from_task == id || &e.to_task == id)
                    .map(|e| e.id.clone())
                    .collect();
                for edge_id in &incident {
                    let downstream = self.next.edges[edge_id].to_task.clone();
                    self.require_pending(&downstream)?;
                }
                for edge_id in incident {
                    self.next.edges.remove(&edge_id);
                    self.summary.removed_dependencies += 1;
                }
                self.next.tasks.remove(id);
                self.summary.removed_tasks += 1;
            }
            EditOp::UpdateTask { id, patch } => {
                self.require_task(id)?;
                self.require_pending(id)?;
                if let Some(field) = patch.other.keys().next() {
                    return Err(ConstellationError::IllegalField(field.clone()));
                }
                let task = self.next.tasks.get_mut(id).expect("checked above");
                if let Some(name) = &patch.name {
                    task.name = name.clone();
                }
                if let Some(description) = &patch.description {
                    task.description = description.clone();
                }
                if let Some(device) = &patch.device {
                    task.device = device.clone();
                }
                if let Some(tips) = &patch.tips {
                    task.tips = tips.clone();
                }
                self.summary.modified_tasks += 1;
            }
            EditOp::AddDependency { dependency } => {
                self.insert_edge(dependency.clone())?;
                self.summary.added_dependencies += 1;
            }
            EditOp::RemoveDependency { id } => {
                let edge = self
                    .next
                    .edges
                    .get(id)
                    .ok_or_else(|| ConstellationError::NotFound(id.to_string()))?;
                let to = edge.to_task.clone();
                self.require_pending(&to)?;
                self.next.edges.remove(id);
                self.summary.removed_dependencies += 1;
            }
            EditOp::UpdateDependency { id, patch } => {
                let edge = self
                    .next
                    .edges
                    .get(id)
                    .ok_or_else(|| ConstellationError::NotFound(id.to_string()))?;
                let to = edge.to_task.clone();
                self.require_pending(&to)?;
                if let Some(field) = patch.other.keys().next() {
                    return Err(ConstellationError::IllegalField(field.clone()));
                }
                let edge = self.next.edges.get_mut(id).expect("checked above");
                if let Some(dep_type) = &patch.dep_type {
                    edge.dep_type = dep_type.clone();
                }
                if let Some(description) = &patch.description {
                    edge.description = description.clone();
                }
                self.summary.modified_dependencies += 1;
            }
            EditOp::BuildConstellation { config, clear } => self.build(config, *clear)?,
        }
        Ok(())
    }

    fn insert_edge(&mut self, spec: EdgeSpec) -> Result<()> {
        if self.next.edges.contains_key(&spec.id) {
            return Err(ConstellationError::DuplicateId(spec.id.to_string()));
        }
        self.require_task(&spec.from_task)?;
        self.require_task(&spec.to_task)?;
        if spec.from_task == spec.to_task {
            return Err(ConstellationError::CycleIntroduced(vec![spec.from_task]));
        }
        if self
            .next
            .find_edge(spec.from_task.as_str(), spec.to_task.as_str())
            .is_some()
        {
            return Err(ConstellationError::DuplicateEdge {
                from: spec.from_task,
                to: spec.to_task,
            });
        }
        self.require_pending(&spec.to_task)?;
        if let Some(mut path) = find_path(&self.next, &spec.to_task, &spec.from_task) {
            path.sort();
            path.dedup();
            return Err(ConstellationError::CycleIntroduced(path));
        }
        self.next.edges.insert(spec.id.clone(), spec.into_edge());
        Ok(())
    }

    fn build(&mut self, config: &BuildConfig, clear: bool) -> Result<()> {
        if clear {
            for task in self.next.tasks.values() {
                self.require_pending(&task.id)?;
            }
            self.summary.removed_tasks += self.next.tasks.len();
            self.summary.removed_dependencies += self.next.edges.len();
            self.next.tasks.clear();
            self.next.edges.clear();
        }

        // Collect every problem instead of stopping at the first one.
        let mut violations = Vec::new();
        for spec in &config.tasks {
            if self.next.tasks.contains_key(&spec.id) {
                violations.push(Violation::DuplicateTaskId {
                    task: spec.id.clone(),
                });
                continue;
            }
            self.next
                .tasks
                .insert(spec.id.clone(), spec.clone().into_task());
            self.summary.added_tasks += 1;
        }
        let mut pairs: BTreeSet<(TaskId, TaskId)> = self
            .next
            .edges
            .values()
            .map(|e| (e.from_task.clone(), e.to_task.clone()))
            .collect();
        for spec in &config.dependencies {
            if self.next.edges.contains_key(&spec.id) {
                violations.push(Violation::DuplicateEdgeId {
                    edge: spec.id.clone(),
                });
                continue;
            }
            let mut dangling = false;
            for endpoint in [&spec.from_task, &spec.to_task] {
                if !self.next.tasks.contains_key(endpoint) {
                    violations.push(Violation::DanglingEdge {
                        edge: spec.id.clone(),
                        missing: endpoint.clone(),
                    });
                    dangling = true;
                }
            }
            if dangling {
                continue;
            }
            if spec.from_task == spec.to_task {
                violations.push(Violation::Cycle {
                    tasks: vec![spec.from_task.clone()],
                });
                continue;
            }
            if !pairs.insert((spec.from_task.clone(), spec.to_task.clone())) {
                violations.push(Violation::DuplicateEdgePair {
                    from: spec.from_task.clone(),
                    to: spec.to_task.clone(),
                });
                continue;
            }
            self.require_pending(&spec.to_task)?;
            self.next
                .edges
                .insert(spec.id.clone(), spec.clone().into_edge());
            self.summary.added_dependencies += 1;
        }
        violations.extend(validate::cycle_violations(&self.next));
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConstellationError::ValidationFailed(violations))
        }
    }
}

/// Shortest path `from ->* to` along edges, if any. Breadth-first with
/// id-ordered expansion so reported cycles are deterministic.
fn find_path(c: &TaskConstellation, from: &TaskId, to: &TaskId) -> Option<Vec<TaskId>> {
    let mut parent: BTreeMap<TaskId, TaskId> = BTreeMap::new();
    let mut queue = VecDeque::from([from.clone()]);
    let mut seen = BTreeSet::from([from.clone()]);
    while let Some(node) = queue.pop_front() {
        if &node == to {
            let mut path = vec![node.clone()];
            let mut cur = node;
            while let Some(p) = parent.get(&cur) {
                path.push(p.clone());
                cur = p.clone();
            }
            path.reverse();
            return Some(path);
        }
        let mut next: Vec<&TaskId> = c.outgoing(node.as_str()).map(|e| &e.to_task).collect();
        next.sort();
        for succ in next {
            if seen.insert(succ.clone()) {
                parent.insert(succ.clone(), node.clone());
                queue.push_back(succ.clone());
            }
        }
    }
    None
}
