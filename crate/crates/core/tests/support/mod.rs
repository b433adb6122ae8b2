//! Randomised checks of the engine's safety properties, edit/sync
//! confluence, the readiness predicate and the wire protocol, shared by the
//! property tests and the acceptance suite. Every oracle here is written
//! from the definitions, not from the code under test. Each check runs on
//! the caller's `TestRunner` and reports the first (shrunk) failure.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use constellation_core::aip::message::{
    decode, encode, ActionResult, Command, CommandBody, CommandResultsBody, DeviceInfoRequestBody,
    DeviceInfoResponseBody, ErrorBody, HeartbeatBody, Idempotency, RegisterBody, TaskBody,
    TaskEndBody, TaskEndStatus, TaskRequest,
};
use constellation_core::aip::session::{Acceptance, SessionState};
use constellation_core::aip::{
    AgentProfile, AgentRegistry, AipMessage, BackoffPolicy, Direction, MessageBody, MsgType,
};
use constellation_core::constellation::TaskConstellation;
use constellation_core::constellation::{
    ConditionRegistry, ConstellationDocument, DependencyType, EdgeSpec, EditDelta, EditOp,
    FailureReason, TaskPatch, TaskSpec, TaskStar, TaskStarLine, TaskStatus,
};
use constellation_core::orchestrator::{
    run, synchronize, EngineConfig, EventKind, OrchestratorEvent, RunInput, ScriptedDispatcher,
    ScriptedOutcome,
};
use constellation_core::planner::{
    Planner, PlannerError, PlannerInput, PlannerOutput, PlannerReply, PlannerState,
};
use constellation_core::time::{SimDuration, SimTime};
use proptest::prelude::*;
use proptest::test_runner::{RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// A runner with a fresh random seed (or `PROPTEST_RNG_SEED`).
pub fn random_runner(cases: u32) -> TestRunner {
    TestRunner::new(cfg(cases))
}

/// A runner whose case sequence is fixed, for reproducible reports.
pub fn fixed_runner(cases: u32) -> TestRunner {
    let config = cfg(cases);
    let rng = TestRng::deterministic_rng(RngAlgorithm::ChaCha);
    TestRunner::new_with_rng(config, rng)
}

fn check<S>(
    runner: &mut TestRunner,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
{
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

const DEVICES: [&str; 3] = ["d0", "d1", "d2"];

/// Edge list of a DAG on `n` nodes: only `i -> j` with `i < j`, one per pair.
fn dag() -> impl Strategy<Value = (usize, Vec<(usize, usize, u8)>)> {
    (1usize..=8).prop_flat_map(|n| {
        let edges = proptest::collection::vec((0..n, 0..n, 0u8..4), 0..=n * 2).prop_map(|raw| {
            let mut seen = BTreeSet::new();
            raw.into_iter()
                .filter(|(a, b, _)| a < b && seen.insert((*a, *b)))
                .collect::<Vec<_>>()
        });
        (Just(n), edges)
    })
}

fn node(i: usize) -> String {
    format!("T{i}")
}

fn dep_type(kind: u8) -> DependencyType {
    match kind {
        0 => DependencyType::Unconditional,
        1 => DependencyType::SuccessOnly,
        2 => DependencyType::Conditional {
            condition_id: "always".into(),
        },
        _ => DependencyType::Conditional {
            condition_id: "ok".into(),
        },
    }
}

fn conditions() -> ConditionRegistry {
    let mut r = ConditionRegistry::new();
    r.register_constant("always", true);
    r.register_constant("never", false);
    r.register_field_equals("ok", "ok", json!(true));
    r
}

fn star(id: &str, device: &str, status: TaskStatus, result: Option<Value>) -> TaskStar {
    TaskStar {
        id: id.into(),
        name: id.into(),
        description: String::new(),
        tips: vec![],
        device: device.into(),
        status,
        result: result.filter(|_| status.is_terminal()),
        failure_reason: (status == TaskStatus::Failed).then_some(FailureReason::ExecutionError),
    }
}

fn line(a: usize, b: usize, kind: u8) -> TaskStarLine {
    TaskStarLine {
        id: format!("{}->{}", node(a), node(b)).into(),
        from_task: node(a).into(),
        to_task: node(b).into(),
        dep_type: dep_type(kind),
        description: String::new(),
    }
}

fn status_of(k: u8) -> TaskStatus {
    match k % 4 {
        0 => TaskStatus::Pending,
        1 => TaskStatus::Running,
        2 => TaskStatus::Completed,
        _ => TaskStatus::Failed,
    }
}

fn result_of(k: u8) -> Option<Value> {
    match k % 3 {
        0 => None,
        1 => Some(json!({"ok": true})),
        _ => Some(json!({"ok": false})),
    }
}

fn document(
    n: usize,
    edges: &[(usize, usize, u8)],
    statuses: &[(u8, u8)],
) -> ConstellationDocument {
    ConstellationDocument {
        request: "random".into(),
        version: 1,
        tasks: (0..n)
            .map(|i| {
                let (s, r) = statuses[i];
                star(&node(i), DEVICES[i % 3], status_of(s), result_of(r))
            })
            .collect(),
        dependencies: edges.iter().map(|&(a, b, k)| line(a, b, k)).collect(),
    }
}

// ----- readiness -----

/// The ready predicate by definition: PENDING, and every inbound edge
/// satisfied by its upstream's terminal status (and success, or the
/// condition, where the edge asks for it).
fn ready_oracle(doc: &ConstellationDocument) -> Vec<String> {
    let by_id: BTreeMap<&str, &TaskStar> = doc.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let terminal = |s: TaskStatus| matches!(s, TaskStatus::Completed | TaskStatus::Failed);
    let mut out: Vec<String> = doc
        .tasks
        .iter()
        .filter(|t| t.status == TaskStatus::Pending)
        .filter(|t| {
            doc.dependencies
                .iter()
                .filter(|e| e.to_task == t.id)
                .all(|e| {
                    let up = by_id[e.from_task.as_str()];
                    match &e.dep_type {
                        DependencyType::Unconditional => terminal(up.status),
                        DependencyType::SuccessOnly => up.status == TaskStatus::Completed,
                        DependencyType::Conditional { condition_id } => {
                            terminal(up.status)
                                && match condition_id.as_str() {
                                    "always" => true,
                                    "never" => false,
                                    "ok" => {
                                        up.result.as_ref().and_then(|r| r.get("ok"))
                                            == Some(&json!(true))
                                    }
                                    other => panic!("unexpected condition {other}"),
                                }
                        }
                    }
                })
        })
        .map(|t| t.id.to_string())
        .collect();
    out.sort();
    out
}

/// `ready_tasks` equals the predicate evaluated by hand.
pub fn ready_tasks_match_the_brute_force_predicate(runner: &mut TestRunner) -> Result<(), String> {
    let strategy = (dag(), proptest::collection::vec((0u8..4, 0u8..3), 8));
    check(runner, strategy, |((n, edges), statuses)| {
        let doc = document(n, &edges, &statuses);
        let c = TaskConstellation::from_document(doc.clone()).unwrap();
        let got: Vec<String> = c
            .ready_tasks(&conditions())
            .unwrap()
            .iter()
            .map(|t| t.to_string())
            .collect();
        prop_assert_eq!(got, ready_oracle(&doc));
        Ok(())
    })
}

pub fn completing_a_task_never_shrinks_the_ready_set(
    runner: &mut TestRunner,
) -> Result<(), String> {
    let strategy = (
        dag(),
        proptest::collection::vec((0u8..4, 0u8..3), 8),
        0usize..8,
    );
    check(runner, strategy, |((n, edges), statuses, pick)| {
        let mut statuses = statuses;
        statuses[pick % n].0 = 1;
        let doc = document(n, &edges, &statuses);
        let c = TaskConstellation::from_document(doc).unwrap();
        let before: BTreeSet<_> = c.ready_tasks(&conditions()).unwrap().into_iter().collect();
        let target = node(pick % n);
        let mut after_c = c.clone();
        after_c
            .transition(&target, TaskStatus::Completed, None, None)
            .unwrap();
        let after: BTreeSet<_> = after_c
            .ready_tasks(&conditions())
            .unwrap()
            .into_iter()
            .collect();
        prop_assert!(before.is_subset(&after));
        Ok(())
    })
}

// ----- edit/sync confluence -----

fn event_for(id: &str, completed: bool, v: u8) -> OrchestratorEvent {
    let kind = if completed {
        EventKind::TaskCompleted
    } else {
        EventKind::TaskFailed
    };
    let mut e = OrchestratorEvent::new(kind, Some(id.into()), SimTime::from_secs(1.0))
        .with_payload(Some(json!({"v": v})));
    if !completed {
        e.failure_reason = Some(FailureReason::ExecutionError);
    }
    e
}

/// Ops aimed at random tasks and edges; some break locality or acyclicity.
fn random_ops(doc: &ConstellationDocument, raw: &[(u8, u8, u8)]) -> Vec<EditOp> {
    // Mostly PENDING targets, so most deltas respect locality; the rest
    // check that rejection does not depend on the fold order either.
    let pending: Vec<_> = doc
        .tasks
        .iter()
        .filter(|t| t.status == TaskStatus::Pending)
        .collect();
    let pool = |x: u8| {
        if x < 6 && !pending.is_empty() {
            pending[x as usize % pending.len()].id.clone()
        } else {
            doc.tasks[x as usize % doc.tasks.len()].id.clone()
        }
    };
    raw.iter()
        .enumerate()
        .flat_map(|(k, &(op, a, b))| {
            let ta = pool(a);
            let tb = pool(b);
            let op = match op % 6 {
                0 => EditOp::AddTask {
                    task: TaskSpec::new(format!("new{k}"), DEVICES[a as usize % 3]),
                },
                1 => EditOp::RemoveTask { id: ta },
                2 => EditOp::UpdateTask {
                    id: ta,
                    patch: TaskPatch {
                        description: Some(format!("edit {k}")),
                        ..Default::default()
                    },
                },
                3 => EditOp::AddDependency {
                    dependency: EdgeSpec::new(format!("x{k}"), ta.as_str(), tb.as_str()),
                },
                4 => match doc
                    .dependencies
                    .get(a as usize % doc.dependencies.len().max(1))
                {
                    Some(e) => EditOp::RemoveDependency { id: e.id.clone() },
                    None => EditOp::AddTask {
                        task: TaskSpec::new(format!("new{k}"), "d0"),
                    },
                },
                _ => {
                    return vec![
                        EditOp::AddTask {
                            task: TaskSpec::new(format!("up{k}"), "d1"),
                        },
                        EditOp::AddDependency {
                            dependency: EdgeSpec::new(
                                format!("y{k}"),
                                format!("up{k}"),
                                tb.as_str(),
                            ),
                        },
                    ]
                }
            };
            vec![op]
        })
        .collect()
}

/// Folding runtime events before or after a delta inside one lock window
/// gives the same post-state, the same issues and the same acceptance.
pub fn folding_before_or_after_a_delta_commutes(runner: &mut TestRunner) -> Result<(), String> {
    let strategy = (
        dag(),
        proptest::collection::vec((0u8..8, 0u8..3), 8),
        proptest::collection::vec((0usize..8, any::<bool>(), 0u8..4), 0..6),
        proptest::collection::vec((0u8..6, 0u8..8, 0u8..8), 1..4),
    );
    check(
        runner,
        strategy,
        |((n, edges), statuses, outcomes, raw_ops)| {
            // Half the tasks still PENDING, so most deltas have room to act.
            let statuses: Vec<(u8, u8)> = statuses
                .into_iter()
                .map(|(s, r)| (if s >= 4 { 0 } else { s }, r))
                .collect();
            let doc = document(n, &edges, &statuses);
            let pre = TaskConstellation::from_document(doc.clone()).unwrap();
            // Runtime events only ever concern dispatched tasks; repeats and
            // conflicts are allowed.
            let events: Vec<OrchestratorEvent> = outcomes
                .iter()
                .map(|&(i, ok, v)| (node(i % n), ok, v))
                .filter(|(id, _, _)| pre.status(id) != Some(TaskStatus::Pending))
                .map(|(id, ok, v)| event_for(&id, ok, v))
                .collect();
            let delta = EditDelta::new(random_ops(&doc, &raw_ops));

            let mut sync_first = pre.clone();
            let issues_a = synchronize(&mut sync_first, &events);
            let applied_a = sync_first.apply_delta(&delta);

            let mut delta_first = pre.clone();
            let applied_b = delta_first.apply_delta(&delta);
            let issues_b = synchronize(&mut delta_first, &events);

            prop_assert_eq!(
                applied_a.is_ok(),
                applied_b.is_ok(),
                "acceptance differs: {:?} vs {:?}",
                applied_a,
                applied_b
            );
            prop_assert_eq!(issues_a, issues_b);
            prop_assert_eq!(sync_first.to_json(), delta_first.to_json());
            Ok(())
        },
    )
}

// ----- engine safety under random plans, outcomes, downtime and edits -----

/// Edits at random: adds, removes, rewires, including ops the engine must
/// reject.
struct ChaosPlanner {
    rng: ChaCha8Rng,
    calls: usize,
    fresh: usize,
}

impl Planner for ChaosPlanner {
    fn plan(&mut self, input: &PlannerInput) -> Result<PlannerReply, PlannerError> {
        self.calls += 1;
        let snapshot = input.snapshot.clone().unwrap_or(ConstellationDocument {
            request: input.request.clone(),
            version: 0,
            tasks: vec![],
            dependencies: vec![],
        });
        let mut ops = Vec::new();
        let ids: Vec<String> = snapshot.tasks.iter().map(|t| t.id.to_string()).collect();
        for _ in 0..self.rng.random_range(0..=3) {
            let pick =
                |rng: &mut ChaCha8Rng| ids.get(rng.random_range(0..ids.len().max(1))).cloned();
            let op = match self.rng.random_range(0..5) {
                0 => {
                    self.fresh += 1;
                    Some(EditOp::AddTask {
                        task: TaskSpec::new(
                            format!("N{}", self.fresh),
                            DEVICES[self.rng.random_range(0..3)],
                        ),
                    })
                }
                1 => pick(&mut self.rng).map(|id| EditOp::RemoveTask { id: id.into() }),
                2 => pick(&mut self.rng).map(|id| EditOp::UpdateTask {
                    id: id.into(),
                    patch: TaskPatch {
                        device: Some(DEVICES[self.rng.random_range(0..3)].into()),
                        ..Default::default()
                    },
                }),
                3 => match (pick(&mut self.rng), pick(&mut self.rng)) {
                    (Some(a), Some(b)) => {
                        self.fresh += 1;
                        Some(EditOp::AddDependency {
                            dependency: EdgeSpec::new(format!("E{}", self.fresh), a, b),
                        })
                    }
                    _ => None,
                },
                _ => {
                    let edges = &snapshot.dependencies;
                    (!edges.is_empty()).then(|| EditOp::RemoveDependency {
                        id: edges[self.rng.random_range(0..edges.len())].id.clone(),
                    })
                }
            };
            ops.extend(op);
        }
        let next_state = match (self.calls, self.rng.random_range(0..20)) {
            (c, _) if c >= 12 => PlannerState::Finish,
            (_, 0) => PlannerState::Fail,
            _ => PlannerState::Continue,
        };
        Ok(PlannerReply {
            output: PlannerOutput {
                observation: format!("{} events", input.events.len()),
                thought: "random".into(),
                next_state,
                result: String::new(),
                delta: EditDelta::new(ops),
            },
            latency: SimDuration::from_millis(self.rng.random_range(1..3000)),
        })
    }
}

fn kahn_acyclic(doc: &ConstellationDocument) -> bool {
    let mut indeg: BTreeMap<&str, usize> = doc.tasks.iter().map(|t| (t.id.as_str(), 0)).collect();
    for e in &doc.dependencies {
        *indeg.get_mut(e.to_task.as_str()).unwrap() += 1;
    }
    let mut stack: Vec<&str> = indeg
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(t, _)| *t)
        .collect();
    let mut seen = 0;
    while let Some(t) = stack.pop() {
        seen += 1;
        for e in doc
            .dependencies
            .iter()
            .filter(|e| e.from_task.as_str() == t)
        {
            let d = indeg.get_mut(e.to_task.as_str()).unwrap();
            *d -= 1;
            if *d == 0 {
                stack.push(e.to_task.as_str());
            }
        }
    }
    seen == doc.tasks.len()
}

/// Random DAGs, outcomes, outages and planner edits never break single
/// assignment, acyclicity, locality, lock exclusion or disconnect
/// convergence.
pub fn engine_keeps_its_invariants_under_random_runs(
    runner: &mut TestRunner,
) -> Result<(), String> {
    let strategy = (
        dag(),
        proptest::collection::vec((1u8..20, any::<bool>()), 8),
        proptest::collection::vec(
            proptest::option::of((0u8..30, proptest::option::of(1u8..20))),
            3,
        ),
        any::<u64>(),
    );
    check(
        runner,
        strategy,
        |((n, edges), outcomes, downtime, planner_seed)| {
            let doc = document(n, &edges, &[(0, 0); 8]);
            let c = TaskConstellation::from_document(doc).unwrap();
            let mut world = ScriptedDispatcher::new(DEVICES);
            for (i, (d, ok)) in outcomes.iter().enumerate().take(n) {
                let secs = f64::from(*d) * 0.5;
                let o = if *ok {
                    ScriptedOutcome::ok(secs)
                } else {
                    ScriptedOutcome::failed(secs)
                };
                world = world.with_outcome(node(i), o);
            }
            let mut forever_down: BTreeMap<&str, SimTime> = BTreeMap::new();
            for (dev, w) in DEVICES.iter().zip(&downtime) {
                if let Some((from, len)) = w {
                    let from = SimTime::from_secs(f64::from(*from));
                    let until = len.map(|l| from + SimDuration::from_secs(f64::from(l)));
                    if until.is_none() {
                        forever_down.insert(dev, from);
                    }
                    world = world.with_downtime(dev, from, until);
                }
            }
            let mut planner = ChaosPlanner {
                rng: ChaCha8Rng::seed_from_u64(planner_seed),
                calls: 0,
                fresh: 0,
            };
            let report = run(
                RunInput::Given(c),
                &mut planner,
                &mut world,
                EngineConfig::default(),
            );

            // The engine's own audit.
            prop_assert_eq!(report.invariants.violations(), 0, "{:?}", report.invariants);

            // Single assignment: each task starts at most once and keeps its device.
            let mut starts: BTreeMap<String, (SimTime, String)> = BTreeMap::new();
            for e in report
                .events
                .iter()
                .filter(|e| e.kind == EventKind::TaskStarted)
            {
                let id = e.task_id.as_ref().unwrap().to_string();
                let dev = e.payload.as_ref().unwrap()["device"]
                    .as_str()
                    .unwrap()
                    .to_owned();
                prop_assert!(
                    starts.insert(id.clone(), (e.timestamp, dev)).is_none(),
                    "{} started twice",
                    id
                );
            }
            for (id, (_, dev)) in &starts {
                prop_assert_eq!(&report.timings[id.as_str()].device.to_string(), dev);
            }
            for (id, _, _) in world.dispatched() {
                prop_assert!(starts.contains_key(id.as_str()));
            }

            // Acyclicity after the last commit.
            let fin = &report.final_constellation;
            prop_assert!(kahn_acyclic(fin));

            // Locality: a dispatched task is never removed or moved by an edit.
            for (id, (_, dev)) in &starts {
                let t = fin.tasks.iter().find(|t| t.id.as_str() == id);
                prop_assert!(t.is_some(), "{} was dispatched and then removed", id);
                let t = t.unwrap();
                prop_assert_eq!(t.device.to_string(), dev.clone());
                prop_assert_ne!(t.status, TaskStatus::Pending);
            }

            // Lock exclusion: nothing starts while a planner call is in progress.
            for (id, (at, _)) in &starts {
                for cyc in &report.edit_cycles {
                    prop_assert!(
                        !(cyc.started_at < *at && *at < cyc.ended_at),
                        "{} started at {} inside cycle {} [{}, {}]",
                        id,
                        at,
                        cyc.index,
                        cyc.started_at,
                        cyc.ended_at
                    );
                }
            }

            // Disconnect convergence: no task is left running on a device that
            // went down for good.
            for t in fin.tasks.iter().filter(|t| t.status == TaskStatus::Running) {
                let since = forever_down.get(t.device.as_str());
                prop_assert!(
                    since.is_none(),
                    "{} still RUNNING on lost {}",
                    t.id,
                    t.device
                );
            }
            Ok(())
        },
    )
}

// ----- wire protocol -----

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 _\\-\"\\\\/\u{e9}\u{4e2d}\n]{0,12}"
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,8}"
}

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        any::<f64>()
            .prop_filter("finite", |f| f.is_finite())
            .prop_map(Value::from),
        text().prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            proptest::collection::btree_map(ident(), inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

/// An optional payload as it can exist on the wire: JSON cannot tell a
/// present `null` from an absent field, so `None` is the only null.
fn opt_value() -> impl Strategy<Value = Option<Value>> {
    proptest::option::of(json_value().prop_filter("null is absence", |v| !v.is_null()))
}

fn action_result() -> impl Strategy<Value = ActionResult> {
    (
        ident(),
        any::<bool>(),
        proptest::option::of(any::<i32>()),
        text(),
        text(),
        opt_value(),
        proptest::option::of(text()),
    )
        .prop_map(|(id, ok, rc, out, err, info, error)| {
            let mut r = if ok {
                ActionResult::ok(id, out)
            } else {
                ActionResult::failed(id, error.clone().unwrap_or_default())
            };
            r.return_code = rc;
            r.stderr = err;
            r.info = info;
            r.error = error;
            r
        })
}

fn body() -> impl Strategy<Value = MessageBody> {
    let command = (
        ident(),
        ident(),
        proptest::collection::btree_map(ident(), json_value(), 0..3),
    )
        .prop_map(|(id, f, args)| Command {
            id,
            function: f.to_uppercase(),
            arguments: args,
        });
    let end_status = prop_oneof![Just(TaskEndStatus::Completed), Just(TaskEndStatus::Failed)];
    prop_oneof![
        (ident(), json_value()).prop_map(|(client_id, metadata)| MessageBody::Register(
            RegisterBody {
                client_id,
                metadata
            }
        )),
        (
            ident(),
            text(),
            text(),
            proptest::collection::vec(text(), 0..3),
            proptest::collection::vec(json_value(), 0..3)
        )
            .prop_map(
                |(task_id, name, description, tips, inputs)| MessageBody::Task(TaskBody {
                    request: TaskRequest {
                        task_id,
                        name,
                        description,
                        tips,
                        inputs
                    },
                })
            ),
        (proptest::collection::vec(command, 0..3), ident()).prop_map(|(actions, response_id)| {
            MessageBody::Command(CommandBody {
                actions,
                response_id,
            })
        }),
        (proptest::collection::vec(action_result(), 0..3), ident()).prop_map(
            |(action_results, prev_response_id)| {
                MessageBody::CommandResults(CommandResultsBody {
                    action_results,
                    prev_response_id,
                })
            }
        ),
        (end_status, opt_value(), proptest::option::of(text())).prop_map(
            |(status, result, error)| MessageBody::TaskEnd(TaskEndBody {
                status,
                result,
                error
            })
        ),
        (
            0u64..1_000_000_000_000,
            proptest::option::of(Just("OK".to_owned()))
        )
            .prop_map(|(us, status)| {
                MessageBody::Heartbeat(HeartbeatBody {
                    timestamp: SimTime::from_micros(us),
                    status,
                })
            }),
        (ident(), ident()).prop_map(|(target_id, request_id)| {
            MessageBody::DeviceInfoRequest(DeviceInfoRequestBody {
                target_id,
                request_id,
            })
        }),
        (json_value(), ident()).prop_map(|(result, response_id)| {
            MessageBody::DeviceInfoResponse(DeviceInfoResponseBody {
                result,
                response_id,
            })
        }),
        (text(), json_value())
            .prop_map(|(error, context)| MessageBody::Error(ErrorBody { error, context })),
    ]
}

fn message() -> impl Strategy<Value = AipMessage> {
    (
        body(),
        any::<bool>(),
        any::<u64>(),
        proptest::option::of(ident()),
    )
        .prop_map(|(body, flip, seq, session)| {
            let ty = body.msg_type();
            let mut m = AipMessage::new(body);
            if flip && ty.direction() == Direction::Bidirectional {
                m = m.with_direction(Direction::ServerToClient);
            }
            m.seq = seq;
            m.session_id = session.or_else(|| (ty == MsgType::Task).then(|| "s".to_owned()));
            m
        })
}

pub fn every_message_type_round_trips(runner: &mut TestRunner) -> Result<(), String> {
    check(runner, message(), |msg| {
        let frame = encode(&msg);
        let back = decode(&frame).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(encode(&back), frame);
        Ok(())
    })
}

/// Message types the generator produces in `samples` draws.
pub fn generated_types(samples: usize) -> BTreeSet<&'static str> {
    use proptest::strategy::ValueTree;
    let mut runner = TestRunner::deterministic();
    (0..samples)
        .map(|_| {
            message()
                .new_tree(&mut runner)
                .unwrap()
                .current()
                .msg_type()
                .as_str()
        })
        .collect()
}

fn stamped(session: &mut SessionState, body: MessageBody) -> AipMessage {
    session.stamp(AipMessage::new(body))
}

/// Duplicating an idempotent inbound message leaves the receiving session
/// exactly as one delivery did.
pub fn duplicate_idempotent_delivery_converges(runner: &mut TestRunner) -> Result<(), String> {
    check(runner, (message(), 1u64..1000), |(msg, seq)| {
        let ty = msg.msg_type();
        prop_assume!(matches!(
            ty.idempotency(),
            Idempotency::Yes | Idempotency::Limited
        ));
        let mut receiver = SessionState::new("s", "peer");
        // Make correlated replies legitimate: the receiver sent the request.
        let mut sender_side = receiver.clone();
        match &msg.body {
            MessageBody::CommandResults(b) => {
                let cmd = MessageBody::Command(CommandBody {
                    actions: vec![],
                    response_id: b.prev_response_id.clone(),
                });
                sender_side = receiver.clone();
                let _ = stamped(&mut sender_side, cmd);
                receiver = sender_side.clone();
            }
            MessageBody::DeviceInfoResponse(b) => {
                let req = MessageBody::DeviceInfoRequest(DeviceInfoRequestBody {
                    target_id: "x".into(),
                    request_id: b.response_id.clone(),
                });
                let _ = stamped(&mut sender_side, req);
                receiver = sender_side.clone();
            }
            _ => {}
        }
        let mut m = msg.clone();
        m.seq = seq;
        m.session_id = Some("s".into());
        prop_assert_eq!(receiver.accept(&m), Ok(Acceptance::Fresh));
        let once = receiver.clone();
        let again = receiver.accept(&m);
        prop_assert!(matches!(again, Ok(Acceptance::Duplicate)), "{:?}", again);
        prop_assert_eq!(receiver, once);
        Ok(())
    })
}

/// A non-idempotent command delivered twice is refused the second time.
pub fn replayed_command_is_refused() -> Result<(), String> {
    let mut s = SessionState::new("s", "peer");
    let mut m = AipMessage::new(MessageBody::Command(CommandBody {
        actions: vec![],
        response_id: "r".into(),
    }));
    m.seq = 4;
    if s.accept(&m) != Ok(Acceptance::Fresh) {
        return Err("first delivery not fresh".into());
    }
    match s.accept(&m) {
        Err(_) => Ok(()),
        Ok(a) => Err(format!("replay accepted as {a:?}")),
    }
}

pub fn duplicate_register_gives_identical_registry() -> Result<(), String> {
    let mut once = AgentRegistry::new();
    let mut p = AgentProfile::new("linux1");
    p.os = Some("linux".into());
    once.register(p.clone(), SimTime::from_secs(1.0))
        .map_err(|e| e.to_string())?;
    let mut twice = once.clone();
    twice
        .register(p, SimTime::from_secs(1.0))
        .map_err(|e| e.to_string())?;
    if once == twice {
        Ok(())
    } else {
        Err("second REGISTER changed the registry".into())
    }
}

/// Each attempt waits `min(base * mult^n, max) * (1 + u)` after the previous
/// one, with `u` uniform in `[-jitter, jitter]`.
pub fn backoff_schedule_follows_the_formula(runner: &mut TestRunner) -> Result<(), String> {
    let strategy = (
        (0.1f64..5.0, 1.0f64..3.0, 1.0f64..60.0, 1u32..8),
        (0.0f64..0.5, any::<u64>(), 0u64..1_000_000_000),
    );
    check(
        runner,
        strategy,
        |((base, mult, max, attempts), (jitter, seed, start_us))| {
            let policy = BackoffPolicy {
                base_s: base,
                multiplier: mult,
                max_s: max,
                max_attempts: attempts,
                jitter,
            };
            let start = SimTime::from_micros(start_us);
            let got = policy.schedule(start, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(got.len(), attempts as usize);
            let mut oracle_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut prev = start;
            for (n, t) in got.iter().enumerate() {
                let nominal = (base * mult.powi(n as i32)).min(max);
                let u: f64 = if jitter > 0.0 {
                    oracle_rng.random_range(-jitter..=jitter)
                } else {
                    0.0
                };
                let want = nominal * (1.0 + u);
                let gap = t.since(prev).as_secs();
                prop_assert!(
                    (gap - want).abs() <= 2e-6,
                    "attempt {}: gap {} want {}",
                    n,
                    gap,
                    want
                );
                prop_assert!(
                    gap >= nominal * (1.0 - jitter) - 2e-6
                        && gap <= nominal * (1.0 + jitter) + 2e-6
                );
                prev = *t;
            }
            prop_assert!(
                prev.since(start)
                    <= policy.exhaustion_bound() + SimDuration::from_micros(attempts as u64)
            );
            Ok(())
        },
    )
}
