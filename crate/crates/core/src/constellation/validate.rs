use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use super::{EdgeId, TaskConstellation, TaskId, TaskStatus};

/// One structural or coherence problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    /// The tasks of one strongly connected component (or a self-loop).
    Cycle {
        tasks: Vec<TaskId>,
    },
    DanglingEdge {
        edge: EdgeId,
        missing: TaskId,
    },
    DuplicateTaskId {
        task: TaskId,
    },
    DuplicateEdgeId {
        edge: EdgeId,
    },
    DuplicateEdgePair {
        from: TaskId,
        to: TaskId,
    },
    /// A non-terminal task carries a result.
    ResultWithoutTerminal {
        task: TaskId,
    },
    /// `failure_reason` is set iff the task is `FAILED`.
    FailureReasonMismatch {
        task: TaskId,
    },
    /// A `CONDITIONAL` edge with an empty condition id.
    EmptyCondition {
        edge: EdgeId,
    },
}

pub(crate) fn validate(c: &TaskConstellation) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut pairs = BTreeSet::new();
    for edge in c.edges.values() {
        for endpoint in [&edge.from_task, &edge.to_task] {
            if !c.tasks.contains_key(endpoint) {
                out.push(Violation::DanglingEdge {
                    edge: edge.id.clone(),
                    missing: endpoint.clone(),
                });
            }
        }
        if !pairs.insert((&edge.from_task, &edge.to_task)) {
            out.push(Violation::DuplicateEdgePair {
                from: edge.from_task.clone(),
                to: edge.to_task.clone(),
            });
        }
        if let super::DependencyType::Conditional { condition_id } = &edge.dep_type {
            if condition_id.is_empty() {
                out.push(Violation::EmptyCondition {
                    edge: edge.id.clone(),
                });
            }
        }
    }

    out.extend(cycle_violations(c));

    for task in c.tasks.values() {
        if task.result.is_some() && !task.status.is_terminal() {
            out.push(Violation::ResultWithoutTerminal {
                task: task.id.clone(),
            });
        }
        if task.failure_reason.is_some() != (task.status == TaskStatus::Failed) {
            out.push(Violation::FailureReasonMismatch {
                task: task.id.clone(),
            });
        }
    }
    out
}

/// Every cycle in the edge relation, one violation per strongly connected
/// component. Edges with a missing endpoint are ignored here.
pub(crate) fn cycle_violations(c: &TaskConstellation) -> Vec<Violation> {
    let mut graph = DiGraph::<&TaskId, ()>::new();
    let index: BTreeMap<&TaskId, NodeIndex> =
        c.tasks.keys().map(|id| (id, graph.add_node(id))).collect();
    for edge in c.edges.values() {
        if let (Some(&a), Some(&b)) = (index.get(&edge.from_task), index.get(&edge.to_task)) {
            graph.add_edge(a, b, ());
        }
    }
    let mut out: Vec<Violation> = tarjan_scc(&graph)
        .into_iter()
        .filter(|scc| scc.len() > 1 || graph.contains_edge(scc[0], scc[0]))
        .map(|scc| {
            let mut tasks: Vec<TaskId> = scc.iter().map(|&n| graph[n].clone()).collect();
            tasks.sort();
            Violation::Cycle { tasks }
        })
        .collect();
    out.sort();
    out
}

/// Kahn's algorithm with the smallest ready id taken first.
pub(crate) fn topological_order(c: &TaskConstellation) -> Option<Vec<TaskId>> {
    let mut indegree: BTreeMap<&TaskId, usize> = c.tasks.keys().map(|id| (id, 0)).collect();
    for edge in c.edges.values() {
        if c.tasks.contains_key(&edge.from_task) {
            if let Some(d) = indegree.get_mut(&edge.to_task) {
                *d += 1;
            }
        }
    }
    let mut frontier: BTreeSet<&TaskId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut order = Vec::with_capacity(c.tasks.len());
    while let Some(id) = frontier.pop_first() {
        order.push(id.clone());
        for edge in c.outgoing(id.as_str()) {
            if let Some(d) = indegree.get_mut(&edge.to_task) {
                *d -= 1;
                if *d == 0 {
                    frontier.insert(&edge.to_task);
                }
            }
        }
    }
    (order.len() == c.tasks.len()).then_some(order)
}
