use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::{json, Value};

use constellation_core::constellation::{ConstellationDocument, TaskConstellation};
use constellation_core::orchestrator::{RunInput, RunOutcome, RunReport};
use constellation_core::planner::load_script_file;
use constellation_core::sim::{
    compute_metrics, emit_markdown_log, simulate, Scenario, ScenarioError, SimRun, Verdict,
    WorldSpec, BUNDLED_SCENARIO_DIR,
};

use crate::config::CliConfig;
use crate::{emit, exit};

pub enum Source {
    Scenario(PathBuf),
    Constellation {
        constellation: PathBuf,
        planner_script: PathBuf,
    },
}

pub struct RunArgs {
    pub source: Source,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub fn bundled_scenario(n: u32) -> PathBuf {
    Path::new(BUNDLED_SCENARIO_DIR).join(format!("scenario{n}.json"))
}

pub fn outcome_code(outcome: RunOutcome) -> i32 {
    match outcome {
        RunOutcome::Success => exit::OK,
        RunOutcome::Partial => exit::PARTIAL,
        RunOutcome::Failed => exit::FAILED,
    }
}

fn scenario_error(e: ScenarioError) -> anyhow::Error {
    anyhow::Error::new(e)
}

pub fn cmd_run(args: RunArgs, config: &CliConfig) -> anyhow::Result<i32> {
    let (run, verdict) = match &args.source {
        Source::Scenario(path) => {
            let mut s = Scenario::load(path).map_err(scenario_error)?;
            config.apply_to_world(&mut s.world);
            let r = s
                .run_with(args.seed, config.engine())
                .map_err(scenario_error)?;
            (r.run, Some(r.verdict))
        }
        Source::Constellation {
            constellation,
            planner_script,
        } => {
            let text = std::fs::read_to_string(constellation)
                .with_context(|| format!("reading {}", constellation.display()))?;
            let doc: ConstellationDocument = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", constellation.display()))?;
            let c = TaskConstellation::from_document(doc)
                .with_context(|| format!("{} does not validate", constellation.display()))?;
            let planner = load_script_file(planner_script)
                .with_context(|| format!("loading {}", planner_script.display()))?;
            let mut devices: Vec<String> =
                c.tasks().values().map(|t| t.device.to_string()).collect();
            devices.sort();
            devices.dedup();
            let mut world = WorldSpec::plain(devices);
            config.apply_to_world(&mut world);
            let run = simulate(
                RunInput::Given(c),
                planner,
                world,
                args.seed,
                config.engine(),
            )
            .map_err(scenario_error)?;
            (run, None)
        }
    };
    report(&run, verdict.as_ref(), args.seed);
    write_outputs(
        &run.report,
        verdict.as_ref(),
        args.out.as_deref(),
        args.log.as_deref(),
    )?;
    Ok(match verdict.as_ref().and_then(Verdict::mismatch) {
        Some(_) => exit::VERDICT_MISMATCH,
        None => outcome_code(run.report.outcome),
    })
}

fn metrics_value(report: &RunReport) -> Value {
    let fin = match TaskConstellation::from_document(report.final_constellation.clone()) {
        Ok(c) => c,
        Err(e) => return json!({"error": e.to_string()}),
    };
    match compute_metrics(report, &fin) {
        Ok(m) => json!(m),
        Err(e) => json!({"error": e.to_string()}),
    }
}

/// The JSON-lines record of a run: every event, then a summary, then the
/// verdict when there is one.
fn report(run: &SimRun, verdict: Option<&Verdict>, seed: u64) {
    let r = &run.report;
    for e in &r.events {
        let mut v = json!(e);
        v["type"] = json!("event");
        emit(v);
    }
    emit(json!({
        "type": "summary",
        "seed": seed,
        "request": r.request,
        "outcome": r.outcome,
        "planner_state": r.planner_state,
        "error": r.error,
        "makespan_s": r.makespan,
        "planning_time_s": r.planning_time,
        "tasks": r.final_constellation.tasks.iter().map(|t| json!({"id": t.id, "status": t.status})).collect::<Vec<_>>(),
        "edit_cycles": r.edit_cycles.len(),
        "invariant_violations": r.invariants.violations(),
        "metrics": metrics_value(r),
    }));
    if let Some(v) = verdict {
        emit(json!({
            "type": "verdict",
            "scenario": v.scenario,
            "passed": v.passed,
            "failed_checks": v.mismatch().map(|m| m.diff).unwrap_or_default(),
        }));
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_outputs(
    report: &RunReport,
    verdict: Option<&Verdict>,
    out: Option<&Path>,
    log: Option<&Path>,
) -> anyhow::Result<()> {
    let markdown = emit_markdown_log(report);
    let mut written = Vec::new();
    if let Some(dir) = out {
        if dir.exists() && !dir.is_dir() {
            bail!("{} exists and is not a directory", dir.display());
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let files = [
            ("report.json", Some(report.to_json())),
            ("log.md", Some(markdown.clone())),
            (
                "metrics.json",
                Some(serde_json::to_string_pretty(&metrics_value(report))?),
            ),
            (
                "verdict.json",
                verdict.map(serde_json::to_string_pretty).transpose()?,
            ),
        ];
        for (name, text) in files {
            if let Some(text) = text {
                let path = dir.join(name);
                write(&path, &text)?;
                written.push(path);
            }
        }
    }
    if let Some(path) = log {
        write(path, &markdown)?;
        written.push(path.to_owned());
    }
    if !written.is_empty() {
        emit(json!({"type": "files", "written": written}));
    }
    Ok(())
}
