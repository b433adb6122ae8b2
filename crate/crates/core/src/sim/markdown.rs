//! Human-readable run log: planner reasoning, the first and last DAG as
//! Mermaid diagrams, a task table, the event timeline and per-cycle edit
//! counts. Output depends only on the report, so equal reports give
//! byte-identical logs.

use std::fmt::Write;

use crate::constellation::{ConstellationDocument, DependencyType};
use crate::orchestrator::RunReport;

fn node_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn label(text: &str) -> String {
    text.replace('"', "'")
}

/// Cell text for a Markdown table: pipes escaped, newlines flattened.
fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', "<br>")
}

/// Topology only: statuses live in the task table, so a clean run's first
/// and last diagrams are identical.
pub fn mermaid(doc: &ConstellationDocument) -> String {
    let mut out = String::from("```mermaid\ngraph TD\n");
    for t in &doc.tasks {
        let _ = writeln!(
            out,
            "    {}[\"{}: {}<br/>{}\"]",
            node_id(t.id.as_str()),
            label(t.id.as_str()),
            label(&t.name),
            label(t.device.as_str()),
        );
    }
    for e in &doc.dependencies {
        let (from, to) = (node_id(e.from_task.as_str()), node_id(e.to_task.as_str()));
        match &e.dep_type {
            DependencyType::Unconditional => {
                let _ = writeln!(out, "    {from} --> {to}");
            }
            DependencyType::SuccessOnly => {
                let _ = writeln!(out, "    {from} -->|success| {to}");
            }
            DependencyType::Conditional { condition_id } => {
                let _ = writeln!(out, "    {from} -.->|{}| {to}", label(condition_id));
            }
        }
    }
    out.push_str("```\n");
    out
}

fn secs(t: f64) -> String {
    format!("{t:.3}")
}

pub fn emit_markdown_log(report: &RunReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Run log\n");
    let _ = writeln!(md, "**Request:** {}\n", report.request);
    let _ = writeln!(md, "- Outcome: {}", report.outcome.as_str());
    let _ = writeln!(md, "- Planner state: {}", report.planner_state.as_str());
    if let Some(e) = &report.error {
        let _ = writeln!(md, "- Error: {e}");
    }
    let _ = writeln!(md, "- Makespan: {} s", secs(report.makespan.as_secs()));
    let _ = writeln!(
        md,
        "- Planning time: {} s\n",
        secs(report.planning_time.as_secs())
    );

    let _ = writeln!(md, "## Planner reasoning\n");
    for (i, t) in report.planner_trace.iter().enumerate() {
        let _ = writeln!(
            md,
            "### Call {} ({:?} at {} s, {} events)\n",
            i + 1,
            t.mode,
            secs(t.at.as_secs()),
            t.events
        );
        let _ = writeln!(md, "- Observation: {}", t.observation);
        let _ = writeln!(md, "- Thought: {}", t.thought);
        let _ = writeln!(md, "- Next state: {}", t.next_state.as_str());
        if !t.result.is_empty() {
            let _ = writeln!(md, "- Result: {}", t.result);
        }
        if let Some(r) = &t.rejection {
            let _ = writeln!(md, "- Rejected edit: {r}");
        }
        md.push('\n');
    }

    let _ = writeln!(md, "## Initial constellation\n");
    match &report.initial {
        Some(doc) => md.push_str(&mermaid(doc)),
        None => md.push_str("_none_\n"),
    }
    let _ = writeln!(md, "\n## Final constellation\n");
    md.push_str(&mermaid(&report.final_constellation));

    let _ = writeln!(md, "\n## Tasks\n");
    let _ = writeln!(
        md,
        "| Task | Device | Status | Start (s) | End (s) | Duration (s) |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for t in &report.final_constellation.tasks {
        let timing = report.timings.get(&t.id);
        let opt = |v: Option<f64>| v.map(secs).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            cell(t.id.as_str()),
            cell(t.device.as_str()),
            t.status,
            opt(timing.map(|x| x.start.as_secs())),
            opt(timing.and_then(|x| x.end).map(|e| e.as_secs())),
            opt(timing.and_then(|x| x.duration).map(|d| d.as_secs())),
        );
    }

    let _ = writeln!(md, "\n## Event timeline\n");
    let _ = writeln!(md, "| Time (s) | Event | Task | Detail |");
    let _ = writeln!(md, "|---|---|---|---|");
    for e in &report.events {
        let detail = match (&e.failure_reason, &e.payload) {
            (Some(r), _) => r.as_str().to_owned(),
            (None, Some(p)) => p.to_string(),
            (None, None) => String::new(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            secs(e.timestamp.as_secs()),
            e.kind.as_str(),
            e.task_id
                .as_ref()
                .map(|t| cell(t.as_str()))
                .unwrap_or_default(),
            cell(&detail)
        );
    }

    let _ = writeln!(md, "\n## Edit cycles\n");
    let _ = writeln!(
        md,
        "| # | Batch | Added tasks | Removed tasks | Modified tasks | Added deps | Removed deps | Modified deps |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
    for c in &report.edit_cycles {
        let batch: Vec<String> = c
            .batch
            .iter()
            .map(|b| match &b.task_id {
                Some(t) => format!("{} {t}", b.kind),
                None => b.kind.clone(),
            })
            .collect();
        let s = c.summary.unwrap_or_default();
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            c.index,
            cell(&batch.join(", ")),
            s.added_tasks,
            s.removed_tasks,
            s.modified_tasks,
            s.added_dependencies,
            s.removed_dependencies,
            s.modified_dependencies
        );
    }
    md
}
