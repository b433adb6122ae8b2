//! Fault-injection scenarios: a device world with scripted outages, a
//! planner script and an expected outcome, run end to end and judged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::network::Outage;
use super::world::{DeviceReport, SimWorld, WorldError, WorldSpec};
use crate::aip::session::WireLog;
use crate::constellation::{DeviceId, TaskId, TaskStatus};
use crate::orchestrator::{run, EngineConfig, RunInput, RunOutcome, RunReport};
use crate::planner::{
    load_script_file, PlannerError, PlannerScript, PlannerState, ScriptedPlanner,
};
use crate::time::SimTime;

/// Where the bundled scenarios live in a source checkout.
pub const BUNDLED_SCENARIO_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios");

/// Marker the scripted jobs print with their running time.
pub const TIMING_MARKER: &str = "elapsed=";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("planner script: {0}")]
    Planner(#[from] PlannerError),
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("outage script names unknown device `{0}`")]
    UnknownDevice(DeviceId),
}

/// What a scenario must end with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub outcome: RunOutcome,
    pub planner_state: PlannerState,
    #[serde(default)]
    pub statuses: BTreeMap<TaskId, TaskStatus>,
    /// Tasks that must exist at the end but not in the first plan.
    #[serde(default)]
    pub spawned: Vec<TaskId>,
    pub aggregate: TaskId,
    pub aggregate_dispatches: u32,
    /// Occurrences of the timing marker in the aggregate result and the
    /// planner's final answer together.
    pub job_timings: usize,
    /// Upstream inputs of the aggregate that arrived as failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_traces: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub id: u32,
    #[serde(default)]
    pub description: String,
    pub request: String,
    /// Device world, relative to the scenario file.
    pub world: String,
    pub planner_script: String,
    /// Outages added to the named devices' links.
    #[serde(default)]
    pub outages: BTreeMap<DeviceId, Vec<Outage>>,
    /// Every task must have ended by this virtual time.
    pub deadline_s: f64,
    pub expect: Expectation,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub world: WorldSpec,
    pub planner: PlannerScript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub expected: Value,
    pub actual: Value,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub scenario: u32,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// The failed checks of a verdict, expected against actual.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("scenario {scenario} verdict mismatch: {}", describe(.diff))]
pub struct VerdictMismatch {
    pub scenario: u32,
    pub diff: Vec<Check>,
}

fn describe(diff: &[Check]) -> String {
    diff.iter()
        .map(|c| format!("{} expected {} got {}", c.name, c.expected, c.actual))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Verdict {
    pub fn mismatch(&self) -> Option<VerdictMismatch> {
        (!self.passed).then(|| VerdictMismatch {
            scenario: self.scenario,
            diff: self
                .checks
                .iter()
                .filter(|c| !c.passed())
                .cloned()
                .collect(),
        })
    }
}

/// Everything one simulated run produced.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub report: RunReport,
    pub wire: WireLog,
    pub devices: BTreeMap<DeviceId, DeviceReport>,
    /// When every device had settled and the run began.
    pub started_at: SimTime,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub run: SimRun,
    pub verdict: Verdict,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Loads a device world file.
pub fn load_world(path: &Path) -> Result<WorldSpec, ScenarioError> {
    parse(path, &read(path)?)
}

/// Boots `world`, runs `input` under `planner` and collects the logs.
pub fn simulate(
    input: RunInput,
    planner: PlannerScript,
    world: WorldSpec,
    seed: u64,
    config: EngineConfig,
) -> Result<SimRun, ScenarioError> {
    let mut planner = ScriptedPlanner::new(planner)?;
    let mut world = SimWorld::new(world, seed)?;
    let started_at = world.boot();
    let report = run(input, &mut planner, &mut world, config);
    Ok(SimRun {
        report,
        wire: world.wire_log().clone(),
        devices: world.device_reports(),
        started_at,
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = parse(path, &read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut world = load_world(&base.join(&file.world))?;
        for (device, outages) in &file.outages {
            let d = world
                .devices
                .iter_mut()
                .find(|d| &d.id == device)
                .ok_or_else(|| ScenarioError::UnknownDevice(device.clone()))?;
            d.link.outages.extend(outages.iter().copied());
        }
        let planner = load_script_file(&base.join(&file.planner_script))?;
        Ok(Self {
            file,
            world,
            planner,
        })
    }

    /// Loads bundled scenario `n` (1, 2 or 3).
    pub fn bundled(n: u32) -> Result<Self, ScenarioError> {
        Self::load(&Path::new(BUNDLED_SCENARIO_DIR).join(format!("scenario{n}.json")))
    }

    pub fn run(&self, seed: u64) -> Result<ScenarioRun, ScenarioError> {
        self.run_with(seed, EngineConfig::default())
    }

    pub fn run_with(&self, seed: u64, config: EngineConfig) -> Result<ScenarioRun, ScenarioError> {
        let run = simulate(
            RunInput::Create {
                request: self.file.request.clone(),
            },
            self.planner.clone(),
            self.world.clone(),
            seed,
            config,
        )?;
        let verdict = judge(&self.file, &run);
        Ok(ScenarioRun { run, verdict })
    }
}

/// Runs bundled scenario `n` with `seed`.
pub fn run_scenario(n: u32, seed: u64) -> Result<ScenarioRun, ScenarioError> {
    Scenario::bundled(n)?.run(seed)
}

fn check(name: &str, expected: Value, actual: Value) -> Check {
    Check {
        name: name.into(),
        expected,
        actual,
    }
}

fn judge(file: &ScenarioFile, run: &SimRun) -> Verdict {
    let e = &file.expect;
    let r = &run.report;
    let fin = &r.final_constellation;
    let status_of = |id: &TaskId| fin.tasks.iter().find(|t| &t.id == id).map(|t| t.status);
    let mut checks = vec![
        check("outcome", json!(e.outcome), json!(r.outcome)),
        check(
            "planner_state",
            json!(e.planner_state),
            json!(r.planner_state),
        ),
    ];
    for (id, want) in &e.statuses {
        checks.push(check(
            &format!("status {id}"),
            json!(want),
            json!(status_of(id)),
        ));
    }
    let initial: Vec<&TaskId> = r
        .initial
        .iter()
        .flat_map(|d| d.tasks.iter().map(|t| &t.id))
        .collect();
    for id in &e.spawned {
        let fresh = status_of(id).is_some() && !initial.contains(&id);
        checks.push(check(&format!("spawned {id}"), json!(true), json!(fresh)));
    }
    checks.push(check(
        "aggregate_dispatches",
        json!(e.aggregate_dispatches),
        json!(r.dispatches_of(e.aggregate.as_str())),
    ));
    let aggregate_text = fin
        .tasks
        .iter()
        .find(|t| t.id == e.aggregate)
        .and_then(|t| t.result.as_ref())
        .map(Value::to_string)
        .unwrap_or_default();
    let final_answer = r
        .planner_trace
        .last()
        .map(|t| t.result.as_str())
        .unwrap_or("");
    let timings =
        aggregate_text.matches(TIMING_MARKER).count() + final_answer.matches(TIMING_MARKER).count();
    checks.push(check("job_timings", json!(e.job_timings), json!(timings)));
    if let Some(want) = e.failure_traces {
        let traces = r.timings.get(&e.aggregate).map_or(0, |t| {
            t.inputs.iter().filter(|i| i.ends_with(" FAILED")).count()
        });
        checks.push(check("failure_traces", json!(want), json!(traces)));
    }
    let last_end = r
        .timings
        .values()
        .filter_map(|t| t.end)
        .max()
        .unwrap_or(run.started_at);
    checks.push(check(
        "tasks_ended_by_deadline",
        json!(true),
        json!(last_end <= SimTime::from_secs(file.deadline_s)),
    ));
    checks.push(check(
        "invariant_violations",
        json!(0),
        json!(r.invariants.violations()),
    ));
    checks.push(check(
        "wire_fifo_violations",
        json!(0),
        json!(run.wire.fifo_violations().len()),
    ));
    checks.push(check(
        "wire_correlation_violations",
        json!(0),
        json!(run.wire.correlation_violations().len()),
    ));
    Verdict {
        scenario: file.id,
        passed: checks.iter().all(Check::passed),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_load_and_scripts_have_expected_shape() {
        let s1 = Scenario::bundled(1).unwrap();
        assert_eq!(s1.planner.triggers.len(), 4);
        assert!(s1.planner.strict);
        let linux1 = s1
            .world
            .devices
            .iter()
            .find(|d| d.id.as_str() == "linux1")
            .unwrap();
        assert_eq!(linux1.link.outages, vec![Outage(5.0, Some(40.0))]);
        let s3 = Scenario::bundled(3).unwrap();
        let down = s3
            .world
            .devices
            .iter()
            .filter(|d| d.link.outages.iter().any(|o| o.1.is_none()))
            .count();
        assert_eq!(down, 3);
    }

    #[test]
    fn unknown_outage_device_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let src = Path::new(BUNDLED_SCENARIO_DIR);
        for f in [
            "devices.json",
            "fixtures/long_job.json",
            "planners/scenario1.json",
        ] {
            let to = dir.path().join(f);
            std::fs::create_dir_all(to.parent().unwrap()).unwrap();
            std::fs::copy(src.join(f), to).unwrap();
        }
        let mut file: Value =
            serde_json::from_str(&read(&src.join("scenario1.json")).unwrap()).unwrap();
        file["outages"] = json!({"linux9": [[1.0, 2.0]]});
        let path = dir.path().join("s.json");
        std::fs::write(&path, file.to_string()).unwrap();
        assert!(matches!(
            Scenario::load(&path),
            Err(ScenarioError::UnknownDevice(_))
        ));
    }
}
