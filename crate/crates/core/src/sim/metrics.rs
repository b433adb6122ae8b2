//! Parallelism of a finished run.
//!
//! Width is a property of the DAG, not of the run: tasks are replayed
//! as-soon-as-possible on unlimited devices with their measured durations.
//! The peak actually observed on the real, device-limited timeline is
//! reported beside it. Durations are integer microseconds throughout, so
//! ties between one task's end and another's start are exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::{TaskConstellation, TaskId, TaskStatus};
use crate::orchestrator::RunReport;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("run is not finished: {0:?} still running")]
    IncompleteRun(Vec<TaskId>),
    #[error("constellation has a cycle")]
    Cyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelismMetrics {
    pub max_parallel_width: usize,
    /// Longest duration-weighted path, seconds.
    pub critical_path: f64,
    /// Sum of all task durations, seconds.
    pub total_work: f64,
    /// `total_work / critical_path`; 1 when the path has zero length and
    /// there is at least one task, 0 for an empty graph.
    pub parallelism_ratio: f64,
    /// Peak simultaneous running tasks in the actual run.
    pub observed_peak: usize,
}

/// Peak overlap of half-open intervals `[start, end)`; empty ones never
/// count.
pub fn peak_overlap(intervals: impl IntoIterator<Item = (SimTime, SimTime)>) -> usize {
    let mut points: Vec<(SimTime, i32)> = Vec::new();
    for (s, e) in intervals {
        if e > s {
            points.push((s, 1));
            points.push((e, -1));
        }
    }
    // Ends sort before starts at the same instant.
    points.sort();
    let (mut cur, mut peak) = (0i32, 0i32);
    for (_, d) in points {
        cur += d;
        peak = peak.max(cur);
    }
    peak as usize
}

/// Structural metrics of `c` under `durations`; missing tasks count as
/// zero-length. `observed_peak` is left at zero.
pub fn dag_metrics(
    c: &TaskConstellation,
    durations: &BTreeMap<TaskId, SimDuration>,
) -> Result<ParallelismMetrics, MetricsError> {
    let order = c.topological_order().ok_or(MetricsError::Cyclic)?;
    let dur = |t: &TaskId| durations.get(t).copied().unwrap_or(SimDuration::ZERO);
    let mut finish: BTreeMap<&TaskId, SimTime> = BTreeMap::new();
    let mut spans = Vec::with_capacity(order.len());
    for t in &order {
        let start = c
            .incoming(t.as_str())
            .map(|e| finish[&e.from_task])
            .max()
            .unwrap_or(SimTime::ZERO);
        let end = start + dur(t);
        finish.insert(t, end);
        spans.push((start, end));
    }
    let critical = finish
        .values()
        .copied()
        .max()
        .unwrap_or(SimTime::ZERO)
        .as_secs();
    let total: SimDuration = order.iter().map(dur).sum();
    let total = total.as_secs();
    let width = peak_overlap(spans.iter().copied());
    let ratio = match (order.is_empty(), critical > 0.0) {
        (true, _) => 0.0,
        (false, false) => 1.0,
        (false, true) => total / critical,
    };
    Ok(ParallelismMetrics {
        max_parallel_width: if order.is_empty() { 0 } else { width.max(1) },
        critical_path: critical,
        total_work: total,
        parallelism_ratio: ratio,
        observed_peak: 0,
    })
}

/// Metrics of a finished run over its final DAG `c`. Tasks that never ran
/// contribute no work.
pub fn compute_metrics(
    report: &RunReport,
    c: &TaskConstellation,
) -> Result<ParallelismMetrics, MetricsError> {
    let running: Vec<TaskId> = c
        .tasks()
        .values()
        .filter(|t| t.status == TaskStatus::Running)
        .map(|t| t.id.clone())
        .collect();
    if !running.is_empty() {
        return Err(MetricsError::IncompleteRun(running));
    }
    let durations: BTreeMap<TaskId, SimDuration> = report
        .timings
        .iter()
        .filter(|(id, _)| c.task(id.as_str()).is_some())
        .filter_map(|(id, t)| t.duration.map(|d| (id.clone(), d)))
        .collect();
    let mut m = dag_metrics(c, &durations)?;
    m.observed_peak = peak_overlap(
        report
            .timings
            .values()
            .filter_map(|t| t.end.map(|e| (t.start, e))),
    );
    Ok(m)
}
