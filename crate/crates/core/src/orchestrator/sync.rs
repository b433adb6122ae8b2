//! Folding runtime outcomes into the constellation, and the post-commit
//! audits the engine runs on every delta.

use serde::{Deserialize, Serialize};

use super::event::{EventKind, OrchestratorEvent};
use crate::constellation::{ConstellationError, TaskConstellation, TaskId, TaskStatus};

/// What happened to an event that could not be folded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyncIssue {
    /// The task was removed earlier in the same window; the event is dropped.
    UnknownTask { task_id: TaskId },
    /// A second, different terminal status for a finished task.
    Conflict {
        task_id: TaskId,
        current: TaskStatus,
        incoming: TaskStatus,
    },
}

/// Folds every terminal event into its task. Statuses only move forward, a
/// repeated outcome is absorbed, and the graph shape is never touched, so
/// the result is independent of event order.
pub fn synchronize(c: &mut TaskConstellation, events: &[OrchestratorEvent]) -> Vec<SyncIssue> {
    let mut issues = Vec::new();
    for e in events.iter().filter(|e| e.is_terminal()) {
        let Some(id) = &e.task_id else { continue };
        let status = if e.kind == EventKind::TaskCompleted {
            TaskStatus::Completed
        } else {
            TaskStatus::Failed
        };
        match c.fold_outcome(id.as_str(), status, e.payload.clone(), e.failure_reason) {
            Ok(_) => {}
            Err(ConstellationError::NotFound(_)) => {
                tracing::info!(task = %id, "outcome for removed task dropped");
                issues.push(SyncIssue::UnknownTask {
                    task_id: id.clone(),
                });
            }
            Err(ConstellationError::IllegalTransition { from, to, .. }) => {
                issues.push(SyncIssue::Conflict {
                    task_id: id.clone(),
                    current: from,
                    incoming: to,
                })
            }
            Err(other) => unreachable!("fold only reports missing tasks and conflicts: {other}"),
        }
    }
    issues
}

/// Edit-locality audit, independent of the delta engine: every task that
/// was not `PENDING` before the delta must survive it with the same fields,
/// status, result and inbound edges.
pub fn locality_violations(pre: &TaskConstellation, post: &TaskConstellation) -> Vec<String> {
    let mut out = Vec::new();
    for (id, before) in pre.tasks() {
        if before.status == TaskStatus::Pending {
            continue;
        }
        let Some(after) = post.task(id.as_str()) else {
            out.push(format!("{id} ({}) removed", before.status));
            continue;
        };
        if after != before {
            out.push(format!("{id} ({}) modified", before.status));
        }
        let inbound = |c: &TaskConstellation| {
            let mut v: Vec<_> = c.incoming(id.as_str()).cloned().collect();
            v.sort_by(|a, b| a.id.cmp(&b.id));
            v
        };
        if inbound(pre) != inbound(post) {
            out.push(format!("{id} ({}) inbound edges changed", before.status));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::{BuildConfig, EdgeSpec, FailureReason, TaskSpec};
    use crate::time::SimTime;

    fn graph() -> TaskConstellation {
        let mut c = TaskConstellation::build(
            "r",
            BuildConfig {
                tasks: vec![
                    TaskSpec::new("A", "d"),
                    TaskSpec::new("B", "d"),
                    TaskSpec::new("C", "d"),
                ],
                dependencies: vec![EdgeSpec::new("e1", "B", "A"), EdgeSpec::new("e2", "C", "A")],
            },
        )
        .unwrap();
        c.transition("B", TaskStatus::Running, None, None).unwrap();
        c.transition("C", TaskStatus::Running, None, None).unwrap();
        c
    }

    fn done(id: &str, kind: EventKind) -> OrchestratorEvent {
        let mut e = OrchestratorEvent::new(kind, Some(id.into()), SimTime::ZERO);
        if kind == EventKind::TaskFailed {
            e.failure_reason = Some(FailureReason::ExecutionError);
        }
        e
    }

    #[test]
    fn fold_order_does_not_matter_and_repeats_are_absorbed() {
        let b = done("B", EventKind::TaskCompleted);
        let c_ = done("C", EventKind::TaskFailed);
        let mut x = graph();
        let mut y = graph();
        synchronize(&mut x, &[b.clone(), c_.clone()]);
        synchronize(&mut y, &[c_.clone(), b.clone(), b.clone()]);
        assert_eq!(x.to_json(), y.to_json());
        let before = x.to_json();
        assert!(synchronize(&mut x, &[b]).is_empty());
        assert_eq!(x.to_json(), before);
    }

    #[test]
    fn removed_task_and_conflict_are_reported() {
        let mut c = graph();
        let issues = synchronize(
            &mut c,
            &[
                done("Z", EventKind::TaskCompleted),
                done("B", EventKind::TaskCompleted),
                done("B", EventKind::TaskFailed),
            ],
        );
        assert_eq!(issues.len(), 2);
        assert!(matches!(issues[0], SyncIssue::UnknownTask { .. }));
        assert!(matches!(issues[1], SyncIssue::Conflict { .. }));
    }

    #[test]
    fn locality_audit_flags_running_task_edits() {
        let pre = graph();
        let mut post = pre.clone();
        post.transition("B", TaskStatus::Completed, None, None)
            .unwrap();
        assert_eq!(locality_violations(&pre, &post), ["B (RUNNING) modified"]);
        let mut post = pre.clone();
        post.add_dependency(EdgeSpec::new("e3", "B", "C"))
            .unwrap_err();
        assert!(locality_violations(&pre, &post).is_empty());
    }
}
