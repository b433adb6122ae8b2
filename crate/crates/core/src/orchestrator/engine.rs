//! The run loop. Outside the lock the engine dispatches every ready task
//! whose device is available. Terminal outcomes only ever enter the queue;
//! they reach the constellation inside a locked phase, which drains the
//! queue in batches, one planner call per batch, until it is empty.
//!
//! Invariants checked while running:
//! - no assignment is created while the lock is held;
//! - a RUNNING task keeps its one assignment until it finishes;
//! - every committed delta leaves the graph acyclic and touches no task
//!   that was past PENDING;
//! - queue plus in-flight shrinks at every step of a locked phase.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde_json::{json, Value};

use super::dispatch::{Availability, DispatchRequest, Dispatcher, Progress, UpstreamInput};
use super::event::{EventBus, EventKind, OrchestratorEvent};
use super::report::{
    BatchedEvent, EditCycleRecord, InvariantReport, PlannerTraceEntry, RunOutcome, RunReport,
    TaskTiming, REPORT_SCHEMA_ID,
};
use super::sync::{locality_violations, synchronize};
use crate::constellation::{
    ConditionRegistry, ConstellationDocument, DeviceId, FailureReason, TaskConstellation, TaskId,
    TaskStatus, Violation,
};
use crate::planner::{fsm_advance, Planner, PlannerError, PlannerInput, PlannerMode, PlannerState};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// A dispatched task that has not ended after this long is cancelled
    /// and failed with `TIMEOUT`.
    pub exec_timeout: SimDuration,
    /// How often a rejected delta is handed back before giving up.
    pub max_rejections: u32,
    pub demonstrations: Vec<Value>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            exec_timeout: SimDuration::from_secs(300.0),
            max_rejections: 1,
            demonstrations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum RunInput {
    /// Ask the planner to build the constellation.
    Create { request: String },
    /// Run an existing constellation; the planner only edits.
    Given(TaskConstellation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lock {
    Free,
    Held,
}

pub struct Orchestrator<'a> {
    config: EngineConfig,
    conditions: ConditionRegistry,
    planner: &'a mut dyn Planner,
    world: &'a mut dyn Dispatcher,
    bus: EventBus,
    c: TaskConstellation,
    lock: Lock,
    assignments: BTreeMap<TaskId, DeviceId>,
    queue: VecDeque<OrchestratorEvent>,
    in_flight: BTreeMap<TaskId, SimTime>,
    synthesized: BTreeSet<TaskId>,
    planner_state: PlannerState,
    error: Option<String>,
    last_committed: u64,
    log: Vec<OrchestratorEvent>,
    timings: BTreeMap<TaskId, TaskTiming>,
    cycles: Vec<EditCycleRecord>,
    trace: Vec<PlannerTraceEntry>,
    inv: InvariantReport,
    planning_time: SimDuration,
}

/// Runs `input` to completion. See [`Orchestrator`] to subscribe to events.
pub fn run(
    input: RunInput,
    planner: &mut dyn Planner,
    world: &mut dyn Dispatcher,
    config: EngineConfig,
) -> RunReport {
    Orchestrator::new(planner, world, config).run(input)
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        planner: &'a mut dyn Planner,
        world: &'a mut dyn Dispatcher,
        config: EngineConfig,
    ) -> Self {
        Self {
            config,
            conditions: ConditionRegistry::new(),
            planner,
            world,
            bus: EventBus::new(),
            c: TaskConstellation::default(),
            lock: Lock::Free,
            assignments: BTreeMap::new(),
            queue: VecDeque::new(),
            in_flight: BTreeMap::new(),
            synthesized: BTreeSet::new(),
            planner_state: PlannerState::Start,
            error: None,
            last_committed: 0,
            log: Vec::new(),
            timings: BTreeMap::new(),
            cycles: Vec::new(),
            trace: Vec::new(),
            inv: InvariantReport::default(),
            planning_time: SimDuration::ZERO,
        }
    }

    pub fn with_conditions(mut self, conditions: ConditionRegistry) -> Self {
        self.conditions = conditions;
        self
    }

    pub fn bus(&mut self) -> &mut EventBus {
        &mut self.bus
    }

    pub fn run(mut self, input: RunInput) -> RunReport {
        let start = self.world.now();
        let initial = match input {
            RunInput::Create { request } => {
                self.c = TaskConstellation::new(request);
                self.create();
                (self.error.is_none()).then(|| self.c.to_document())
            }
            RunInput::Given(c) => {
                self.c = c;
                let violations = self.c.validate();
                if !violations.is_empty() {
                    self.error = Some(format!("constellation does not validate: {violations:?}"));
                }
                Some(self.c.to_document())
            }
        };
        self.last_committed = self.c.version();
        while self.step() {}
        self.finish(start, initial)
    }

    fn halted(&self) -> bool {
        self.planner_state.is_terminal() || self.error.is_some()
    }

    /// One turn of the loop; false once the run is over.
    fn step(&mut self) -> bool {
        if !self.halted() {
            self.dispatch_phase();
        }
        if !self.queue.is_empty() {
            self.edit_phase();
            return true;
        }
        if self.in_flight.is_empty() && (self.halted() || self.c.is_quiescent(&self.conditions)) {
            return false;
        }
        let p = self.advance_world(None);
        if p.idle && p.outcomes.is_empty() && !p.availability_changed && self.queue.is_empty() {
            // Waiting would change nothing: whatever is ready now can never run.
            let stuck = self.stuck_tasks();
            if stuck.is_empty() {
                self.inv.details.push(format!(
                    "stalled at {} with no runnable task",
                    self.world.now()
                ));
                return false;
            }
            for id in stuck {
                self.synthesize_failure(&id, "device never became available");
            }
        }
        true
    }

    fn ready(&mut self) -> Vec<TaskId> {
        match self.c.ready_tasks(&self.conditions) {
            Ok(ready) => ready,
            Err(e) => {
                self.inv.details.push(format!("readiness: {e}"));
                Vec::new()
            }
        }
    }

    fn stuck_tasks(&mut self) -> Vec<TaskId> {
        if self.halted() {
            return Vec::new();
        }
        self.ready()
            .into_iter()
            .filter(|id| !self.synthesized.contains(id))
            .collect()
    }

    // ----- dispatch (lock free) -----

    fn dispatch_phase(&mut self) {
        debug_assert_eq!(self.lock, Lock::Free);
        for id in self.ready() {
            if self.synthesized.contains(&id) || self.assignments.contains_key(&id) {
                continue;
            }
            let device = self
                .c
                .task(id.as_str())
                .expect("ready task exists")
                .device
                .clone();
            match self.world.availability(&device) {
                Availability::Available => self.start_task(&id, device),
                Availability::Lost => self.synthesize_failure(&id, "device lost"),
                Availability::Unavailable => {}
            }
        }
        self.audit_assignments();
    }

    fn start_task(&mut self, id: &TaskId, device: DeviceId) {
        if self.lock == Lock::Held {
            self.inv.assignments_while_held += 1;
        }
        if self.c.version() != self.last_committed {
            self.inv.dispatch_version_mismatches += 1;
        }
        if let Some(prev) = self.assignments.insert(id.clone(), device.clone()) {
            self.inv.single_assignment_violations += 1;
            self.inv
                .details
                .push(format!("{id} reassigned from {prev} to {device}"));
        }
        self.c
            .transition(id.as_str(), TaskStatus::Running, None, None)
            .expect("ready tasks are PENDING");
        let mut inputs: Vec<UpstreamInput> = self
            .c
            .incoming(id.as_str())
            .filter_map(|e| self.c.task(e.from_task.as_str()))
            .map(|up| UpstreamInput {
                task_id: up.id.clone(),
                status: up.status,
                failure_reason: up.failure_reason,
                result: up.result.clone(),
            })
            .collect();
        inputs.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        let now = self.world.now();
        let timing = self.timings.entry(id.clone()).or_insert(TaskTiming {
            device: device.clone(),
            start: now,
            end: None,
            duration: None,
            dispatches: 0,
            inputs: Vec::new(),
        });
        timing.dispatches += 1;
        timing.inputs = inputs
            .iter()
            .map(|i| format!("{} {}", i.task_id, i.status))
            .collect();
        self.publish(
            OrchestratorEvent::new(EventKind::TaskStarted, Some(id.clone()), now)
                .with_payload(Some(json!({"device": device}))),
        );
        self.in_flight
            .insert(id.clone(), now + self.config.exec_timeout);
        let task = self.c.task(id.as_str()).expect("exists").clone();
        let request = DispatchRequest {
            task,
            inputs,
            dispatched_at: now,
        };
        if let Err(e) = self.world.dispatch(request) {
            self.in_flight.remove(id);
            self.fail(id, FailureReason::AgentDisconnected, &e.to_string());
        }
    }

    /// Queues a failure for a task the world will never report on.
    fn synthesize_failure(&mut self, id: &TaskId, why: &str) {
        self.synthesized.insert(id.clone());
        self.fail(id, FailureReason::AgentDisconnected, why);
    }

    fn fail(&mut self, id: &TaskId, reason: FailureReason, why: &str) {
        let now = self.world.now();
        if let Some(t) = self.timings.get_mut(id) {
            t.end = Some(now);
            t.duration = Some(now - t.start);
        }
        let mut e = OrchestratorEvent::new(EventKind::TaskFailed, Some(id.clone()), now)
            .with_payload(Some(json!({"failure_reason": reason, "error": why})));
        e.failure_reason = Some(reason);
        self.publish(e.clone());
        self.queue.push_back(e);
    }

    // ----- time -----

    fn advance_world(&mut self, until: Option<SimTime>) -> Progress {
        let deadline = self.in_flight.values().min().copied();
        let cap = match (until, deadline) {
            (Some(u), Some(d)) => Some(u.min(d)),
            (u, d) => u.or(d),
        };
        let p = self.world.advance(cap);
        for o in &p.outcomes {
            if self.in_flight.remove(&o.task_id).is_none() {
                self.inv.dropped_late_outcomes += 1;
                continue;
            }
            if let Some(t) = self.timings.get_mut(&o.task_id) {
                t.end = Some(o.at);
                t.duration = Some(o.at - t.start);
            }
            let kind = if o.status == TaskStatus::Completed {
                EventKind::TaskCompleted
            } else {
                EventKind::TaskFailed
            };
            let mut e = OrchestratorEvent::new(kind, Some(o.task_id.clone()), o.at)
                .with_payload(o.result.clone());
            e.failure_reason = o.failure_reason;
            self.publish(e.clone());
            self.queue.push_back(e);
        }
        let now = self.world.now();
        let expired: Vec<TaskId> = self
            .in_flight
            .iter()
            .filter(|(_, d)| **d <= now)
            .map(|(t, _)| t.clone())
            .collect();
        for id in expired {
            self.world.cancel(&id);
            self.in_flight.remove(&id);
            self.fail(&id, FailureReason::Timeout, "execution timed out");
        }
        p
    }

    /// Lets `d` of virtual time pass; returns how many outcomes arrived.
    fn sleep(&mut self, d: SimDuration) -> usize {
        let until = self.world.now() + d;
        let before = self.queue.len();
        while self.world.now() < until {
            self.advance_world(Some(until));
        }
        self.queue.len() - before
    }

    // ----- editing (lock held) -----

    fn create(&mut self) {
        let input = PlannerInput {
            demonstrations: self.config.demonstrations.clone(),
            ..PlannerInput::create(self.c.request(), self.world.profiles())
        };
        self.consult(input, Vec::new());
    }

    fn edit_phase(&mut self) {
        self.lock = Lock::Held;
        let mut phi = Vec::new();
        while !self.queue.is_empty() {
            phi.push(self.queue.len() + self.in_flight.len());
            let batch: Vec<OrchestratorEvent> = self.queue.drain(..).collect();
            let issues = synchronize(&mut self.c, &batch);
            self.inv.sync_issues.extend(issues);
            self.audit_assignments();
            if self.halted() {
                continue;
            }
            let input = PlannerInput {
                demonstrations: self.config.demonstrations.clone(),
                ..PlannerInput::edit(
                    self.c.request(),
                    self.world.profiles(),
                    self.c.to_document(),
                    batch.clone(),
                )
            };
            self.consult(input, batch);
        }
        self.inv.phi_traces.push(phi);
        self.lock = Lock::Free;
    }

    /// One planner consultation: call, let the call's latency elapse, commit
    /// or reject the delta, retrying a rejected delta up to the configured
    /// number of times.
    fn consult(&mut self, mut input: PlannerInput, batch: Vec<OrchestratorEvent>) {
        let mut rejections = 0;
        loop {
            let started = self.world.now();
            let snapshot_version = self.c.version();
            let reply = match self.planner.plan(&input) {
                Ok(r) => r,
                Err(e) => {
                    self.halt(e);
                    return;
                }
            };
            let arrivals = self.sleep(reply.latency);
            self.planning_time += reply.latency;
            let out = reply.output;
            self.trace.push(PlannerTraceEntry {
                at: started,
                mode: input.mode,
                events: input.events.len(),
                observation: out.observation.clone(),
                thought: out.thought.clone(),
                next_state: out.next_state,
                result: out.result.clone(),
                rejection: input.rejection.clone(),
            });
            debug_assert_eq!(
                snapshot_version,
                self.c.version(),
                "nothing edits during a call"
            );
            let pre = self.c.clone();
            let mut record = EditCycleRecord {
                index: self.cycles.len(),
                started_at: started,
                ended_at: self.world.now(),
                batch: batch
                    .iter()
                    .map(|e| BatchedEvent {
                        kind: e.kind.as_str().to_owned(),
                        task_id: e.task_id.clone(),
                    })
                    .collect(),
                arrivals_during_call: arrivals,
                delta: Some(out.delta.clone()),
                summary: None,
                rejection: None,
                planner_state: self.planner_state,
            };
            match self.c.apply_delta(&out.delta) {
                Ok(summary) => {
                    self.audit_commit(&pre);
                    self.last_committed = self.c.version();
                    record.summary = Some(summary);
                    self.publish(
                        OrchestratorEvent::new(
                            EventKind::ConstellationModified,
                            None,
                            self.world.now(),
                        )
                        .with_payload(Some(json!(summary))),
                    );
                    match fsm_advance(self.planner_state, out.next_state) {
                        Ok(s) => self.planner_state = s,
                        Err(e) => self.halt(e.into()),
                    }
                    record.planner_state = self.planner_state;
                    self.cycles.push(record);
                    return;
                }
                Err(e) => {
                    record.rejection = Some(e.to_string());
                    self.cycles.push(record);
                    if rejections >= self.config.max_rejections {
                        self.halt(PlannerError::InvalidDelta(e.to_string()));
                        return;
                    }
                    rejections += 1;
                    input.rejection = Some(e.to_string());
                    if input.mode == PlannerMode::Edit {
                        input.snapshot = Some(self.c.to_document());
                    }
                }
            }
        }
    }

    fn halt(&mut self, e: PlannerError) {
        tracing::warn!(error = %e, "planner error; run will end FAILED");
        self.error = Some(e.to_string());
    }

    // ----- audits -----

    fn audit_assignments(&mut self) {
        for id in self.c.running() {
            if !self.assignments.contains_key(&id) {
                self.inv.single_assignment_violations += 1;
                self.inv
                    .details
                    .push(format!("{id} RUNNING without assignment"));
            }
        }
    }

    fn audit_commit(&mut self, pre: &TaskConstellation) {
        let cycles = self
            .c
            .validate()
            .into_iter()
            .filter(|v| matches!(v, Violation::Cycle { .. }))
            .count();
        self.inv.acyclicity_violations += cycles;
        if self.c.topological_order().is_none() && cycles == 0 {
            self.inv.acyclicity_violations += 1;
        }
        let local = locality_violations(pre, &self.c);
        self.inv.locality_violations += local.len();
        self.inv.details.extend(local);
    }

    fn publish(&mut self, e: OrchestratorEvent) {
        if let Some(last) = self.log.last() {
            debug_assert!(
                last.timestamp <= e.timestamp,
                "event timestamps never go back"
            );
        }
        self.bus.publish(&e);
        self.log.push(e);
    }

    // ----- wrap-up -----

    fn finish(mut self, start: SimTime, initial: Option<ConstellationDocument>) -> RunReport {
        if self.halted() {
            let now = self.world.now();
            for id in self.c.ids_with_status(TaskStatus::Pending) {
                let payload = json!({"failure_reason": FailureReason::PlannerCancelled, "error": "cancelled: planner stopped"});
                self.c
                    .transition(
                        id.as_str(),
                        TaskStatus::Failed,
                        Some(payload.clone()),
                        Some(FailureReason::PlannerCancelled),
                    )
                    .expect("PENDING may fail");
                let mut e = OrchestratorEvent::new(EventKind::TaskFailed, Some(id), now)
                    .with_payload(Some(payload));
                e.failure_reason = Some(FailureReason::PlannerCancelled);
                self.publish(e);
            }
        }
        for id in self.c.running() {
            let device = self
                .assignments
                .get(&id)
                .cloned()
                .unwrap_or_else(|| DeviceId::new(""));
            if self.world.availability(&device) != Availability::Available {
                self.inv.disconnected_running += 1;
                self.inv
                    .details
                    .push(format!("{id} still RUNNING on disconnected {device}"));
            }
        }
        let outcome = self.outcome();
        RunReport {
            schema: REPORT_SCHEMA_ID.to_owned(),
            request: self.c.request().to_owned(),
            outcome,
            planner_state: self.planner_state,
            error: self.error.clone(),
            initial,
            final_constellation: self.c.to_document(),
            timings: self.timings,
            events: self.log,
            edit_cycles: self.cycles,
            planner_trace: self.trace,
            makespan: self.world.now() - start,
            planning_time: self.planning_time,
            invariants: self.inv,
        }
    }

    /// FAILED iff the planner gave up or erred. PARTIAL when work was left
    /// undone, a finished task consumed a failed input, or failures stand
    /// without the planner having signed off. SUCCESS otherwise.
    fn outcome(&self) -> RunOutcome {
        if self.error.is_some() || self.planner_state == PlannerState::Fail {
            return RunOutcome::Failed;
        }
        let tasks = self.c.tasks();
        let leftover = tasks.values().any(|t| {
            t.status == TaskStatus::Pending
                || t.failure_reason == Some(FailureReason::PlannerCancelled)
        });
        let degraded = tasks.values().any(|t| {
            t.status == TaskStatus::Completed
                && self
                    .c
                    .incoming(t.id.as_str())
                    .any(|e| self.c.status(e.from_task.as_str()) == Some(TaskStatus::Failed))
        });
        let unrecovered = self.planner_state != PlannerState::Finish
            && tasks.values().any(|t| t.status == TaskStatus::Failed);
        let none_completed =
            !tasks.is_empty() && tasks.values().all(|t| t.status != TaskStatus::Completed);
        if leftover || degraded || unrecovered || none_completed {
            RunOutcome::Partial
        } else {
            RunOutcome::Success
        }
    }
}
