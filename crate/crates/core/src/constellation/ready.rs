use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde_json::Value;

use super::{ConstellationError, DependencyType, Result, TaskConstellation, TaskId, TaskStatus};

/// Predicate over the upstream task's result payload.
pub type ConditionPredicate = Arc<dyn Fn(Option<&Value>) -> bool + Send + Sync>;

/// Named predicates for `CONDITIONAL` edges.
#[derive(Clone, Default)]
pub struct ConditionRegistry {
    predicates: BTreeMap<String, ConditionPredicate>,
}

impl fmt::Debug for ConditionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.predicates.keys()).finish()
    }
}

impl ConditionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, id: impl Into<String>, predicate: F) -> &mut Self
    where
        F: Fn(Option<&Value>) -> bool + Send + Sync + 'static,
    {
        self.predicates.insert(id.into(), Arc::new(predicate));
        self
    }

    pub fn register_constant(&mut self, id: impl Into<String>, value: bool) -> &mut Self {
        self.register(id, move |_| value)
    }

    /// Holds when the result is an object whose `field` equals `expected`.
    pub fn register_field_equals(
        &mut self,
        id: impl Into<String>,
        field: impl Into<String>,
        expected: Value,
    ) -> &mut Self {
        let field = field.into();
        self.register(id, move |result| {
            result.and_then(|r| r.get(&field)) == Some(&expected)
        })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.predicates.contains_key(id)
    }

    pub fn evaluate(&self, id: &str, result: Option<&Value>) -> Result<bool> {
        self.predicates
            .get(id)
            .map(|p| p(result))
            .ok_or_else(|| ConstellationError::UnknownCondition(id.to_owned()))
    }
}

impl TaskConstellation {
    /// `PENDING` tasks whose incoming edges are all satisfied, sorted by id.
    pub fn ready_tasks(&self, conditions: &ConditionRegistry) -> Result<Vec<TaskId>> {
        let mut ready = Vec::new();
        'tasks: for task in self.tasks.values() {
            if task.status != TaskStatus::Pending {
                continue;
            }
            for edge in self.incoming(task.id.as_str()) {
                let Some(up) = self.tasks.get(&edge.from_task) else {
                    continue 'tasks;
                };
                let satisfied = match &edge.dep_type {
                    DependencyType::Unconditional => up.status.is_terminal(),
                    DependencyType::SuccessOnly => up.status == TaskStatus::Completed,
                    DependencyType::Conditional { condition_id } => {
                        up.status.is_terminal()
                            && conditions.evaluate(condition_id, up.result.as_ref())?
                    }
                };
                if !satisfied {
                    continue 'tasks;
                }
            }
            ready.push(task.id.clone());
        }
        Ok(ready)
    }

    /// `PENDING` tasks that can never become ready given the current terminal
    /// statuses: some input edge is decided unsatisfiable, or comes from a task
    /// that is itself blocked. A condition with no registered evaluator counts
    /// as unsatisfiable.
    pub fn blocked_tasks(&self, conditions: &ConditionRegistry) -> BTreeSet<TaskId> {
        let mut blocked = BTreeSet::new();
        let Some(order) = self.topological_order() else {
            return blocked;
        };
        for id in order {
            let task = &self.tasks[&id];
            if task.status != TaskStatus::Pending {
                continue;
            }
            let is_blocked = self.incoming(id.as_str()).any(|edge| {
                let Some(up) = self.tasks.get(&edge.from_task) else {
                    return true;
                };
                if blocked.contains(&up.id) {
                    return true;
                }
                match &edge.dep_type {
                    DependencyType::Unconditional => false,
                    DependencyType::SuccessOnly => up.status == TaskStatus::Failed,
                    DependencyType::Conditional { condition_id } => {
                        up.status.is_terminal()
                            && !conditions
                                .evaluate(condition_id, up.result.as_ref())
                                .unwrap_or(false)
                    }
                }
            });
            if is_blocked {
                blocked.insert(id);
            }
        }
        blocked
    }

    /// True iff every task is terminal or permanently blocked.
    pub fn is_quiescent(&self, conditions: &ConditionRegistry) -> bool {
        let blocked = self.blocked_tasks(conditions);
        self.tasks
            .values()
            .all(|t| t.status.is_terminal() || blocked.contains(&t.id))
    }
}
