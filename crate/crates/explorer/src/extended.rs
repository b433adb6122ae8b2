//! The lock protocol over real constellations: edit steps fold the dequeued
//! event and apply a planner delta through `constellation-core`, so edit
//! locality and acyclicity are checked against the production code rather
//! than stubs. Planner choice is nondeterministic over the empty delta and
//! one edge toggle per ordered task pair.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use constellation_core::constellation::{
    ConditionRegistry, EdgeSpec, EditDelta, EditOp, TaskConstellation, TaskSpec, TaskStatus,
};

use crate::engine::{Model, Successor};
use crate::mirror::Lock;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedConfig {
    pub tasks: usize,
    pub devices: usize,
    pub queue_bound: usize,
    pub initial_edges: Vec<(usize, usize)>,
}

impl Default for ExtendedConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            devices: 2,
            queue_bound: 2,
            initial_edges: vec![(0, 2)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExtendedState {
    pub status: Vec<TaskStatus>,
    pub assigned: Vec<Option<u8>>,
    pub edges: BTreeSet<(u8, u8)>,
    pub lock: Lock,
    pub queue: Vec<(Outcome, u8)>,
    pub available: u16,
}

pub const ACTIONS: &[&str] = &[
    "Init",
    "Enqueue",
    "Acquire",
    "EditStep",
    "Release",
    "Dispatch",
    "UpdateDevices",
];

const ENQUEUE: usize = 1;
const ACQUIRE: usize = 2;
const EDIT: usize = 3;
const RELEASE: usize = 4;
const DISPATCH: usize = 5;
const UPDATE_DEVICES: usize = 6;

#[derive(Debug, Clone)]
pub struct ExtendedModel {
    cfg: ExtendedConfig,
    all_devices: u16,
    conditions: ConditionRegistry,
}

fn task_id(t: usize) -> String {
    format!("t{t}")
}

fn edge_id(u: usize, v: usize) -> String {
    format!("e{u}_{v}")
}

impl ExtendedModel {
    pub fn new(cfg: ExtendedConfig) -> Self {
        assert!(cfg.devices <= 16 && cfg.tasks <= 16);
        let all_devices = ((1u32 << cfg.devices) - 1) as u16;
        Self {
            cfg,
            all_devices,
            conditions: ConditionRegistry::new(),
        }
    }

    /// Materializes the constellation part of `s` as a real constellation.
    fn constellation(&self, s: &ExtendedState) -> TaskConstellation {
        let mut c = TaskConstellation::new("explore");
        for t in 0..self.cfg.tasks {
            c.add_task(TaskSpec::new(task_id(t), "dev"))
                .expect("fresh ids");
        }
        for &(u, v) in &s.edges {
            c.add_dependency(EdgeSpec::new(
                edge_id(u as usize, v as usize),
                task_id(u as usize),
                task_id(v as usize),
            ))
            .expect("state graphs are acyclic");
        }
        for (t, st) in s.status.iter().enumerate() {
            let id = task_id(t);
            match st {
                TaskStatus::Pending => {}
                TaskStatus::Running => c.transition(&id, TaskStatus::Running, None, None).unwrap(),
                terminal => {
                    if s.assigned[t].is_some() {
                        c.transition(&id, TaskStatus::Running, None, None).unwrap();
                    }
                    c.transition(&id, *terminal, None, None).unwrap();
                }
            }
        }
        c
    }

    fn edges_of(c: &TaskConstellation) -> BTreeSet<(u8, u8)> {
        let index = |id: &str| id[1..].parse::<u8>().expect("generated id");
        c.edges()
            .values()
            .map(|e| (index(e.from_task.as_str()), index(e.to_task.as_str())))
            .collect()
    }

    fn candidate_deltas(&self, s: &ExtendedState) -> Vec<EditDelta> {
        let mut out = vec![EditDelta::empty()];
        for u in 0..self.cfg.tasks {
            for v in 0..self.cfg.tasks {
                if u == v {
                    continue;
                }
                let op = if s.edges.contains(&(u as u8, v as u8)) {
                    EditOp::RemoveDependency {
                        id: edge_id(u, v).into(),
                    }
                } else {
                    EditOp::AddDependency {
                        dependency: EdgeSpec::new(edge_id(u, v), task_id(u), task_id(v)),
                    }
                };
                out.push(EditDelta::single(op));
            }
        }
        out
    }

    fn fold(s: &mut ExtendedState, event: (Outcome, u8)) {
        let t = event.1 as usize;
        if s.status[t] == TaskStatus::Running {
            s.status[t] = match event.0 {
                Outcome::Completed => TaskStatus::Completed,
                Outcome::Failed => TaskStatus::Failed,
            };
        }
    }

    /// Applies `delta` to `s`; `None` when the constellation rejects it.
    fn apply(&self, s: &ExtendedState, delta: &EditDelta) -> Option<ExtendedState> {
        let mut c = self.constellation(s);
        c.apply_delta(delta).ok()?;
        let mut n = s.clone();
        n.edges = Self::edges_of(&c);
        Some(n)
    }

    fn ready(&self, s: &ExtendedState) -> Vec<usize> {
        self.constellation(s)
            .ready_tasks(&self.conditions)
            .expect("no conditional edges")
            .iter()
            .map(|id| id.as_str()[1..].parse().unwrap())
            .collect()
    }
}

impl Model for ExtendedModel {
    type State = ExtendedState;

    fn actions(&self) -> &'static [&'static str] {
        ACTIONS
    }

    fn initial_states(&self) -> Vec<ExtendedState> {
        vec![ExtendedState {
            status: vec![TaskStatus::Pending; self.cfg.tasks],
            assigned: vec![None; self.cfg.tasks],
            edges: self
                .cfg
                .initial_edges
                .iter()
                .map(|&(u, v)| (u as u8, v as u8))
                .collect(),
            lock: Lock::Free,
            queue: Vec::new(),
            available: self.all_devices,
        }]
    }

    fn successors(&self, s: &ExtendedState, out: &mut Vec<Successor<ExtendedState>>) {
        // Each running task reports exactly one outcome.
        for t in 0..self.cfg.tasks {
            if s.status[t] != TaskStatus::Running || s.queue.iter().any(|e| e.1 as usize == t) {
                continue;
            }
            for outcome in [Outcome::Completed, Outcome::Failed] {
                let mut n = s.clone();
                n.queue.push((outcome, t as u8));
                out.push(Successor {
                    action: ENQUEUE,
                    state: n,
                });
            }
        }

        match s.lock {
            Lock::Free => {
                let mut n = s.clone();
                n.lock = Lock::Held;
                out.push(Successor {
                    action: ACQUIRE,
                    state: n,
                });
            }
            Lock::Held => {
                if let Some((&event, rest)) = s.queue.split_first() {
                    let mut popped = s.clone();
                    popped.queue = rest.to_vec();
                    for delta in self.candidate_deltas(&popped) {
                        if let Some(mut n) = self.apply(&popped, &delta) {
                            Self::fold(&mut n, event);
                            out.push(Successor {
                                action: EDIT,
                                state: n,
                            });
                        }
                    }
                } else {
                    let mut n = s.clone();
                    n.lock = Lock::Free;
                    out.push(Successor {
                        action: RELEASE,
                        state: n,
                    });
                }
            }
        }

        if s.lock == Lock::Free {
            for t in self.ready(s) {
                for d in 0..self.cfg.devices {
                    if s.available & (1 << d) != 0 {
                        let mut n = s.clone();
                        n.status[t] = TaskStatus::Running;
                        n.assigned[t] = Some(d as u8);
                        out.push(Successor {
                            action: DISPATCH,
                            state: n,
                        });
                    }
                }
            }
        }

        for subset in 0..=self.all_devices {
            if subset != s.available {
                let mut n = s.clone();
                n.available = subset;
                out.push(Successor {
                    action: UPDATE_DEVICES,
                    state: n,
                });
            }
        }
    }

    fn constraint(&self, s: &ExtendedState) -> bool {
        s.queue.len() <= self.cfg.queue_bound
    }

    fn check_state(&self, s: &ExtendedState) -> Vec<&'static str> {
        let mut out = Vec::new();
        let i1 = s.status.iter().zip(&s.assigned).all(|(st, a)| {
            *st != TaskStatus::Running || a.is_some_and(|d| (d as usize) < self.cfg.devices)
        });
        if !i1 {
            out.push("I1");
        }
        if self.constellation(s).topological_order().is_none() {
            out.push("I2");
        }
        out
    }

    fn check_step(
        &self,
        from: &ExtendedState,
        action: usize,
        to: &ExtendedState,
    ) -> Vec<&'static str> {
        let mut out = Vec::new();
        let n = self.cfg.tasks;
        if (0..n).any(|t| {
            from.status[t] == TaskStatus::Running
                && to.status[t] == TaskStatus::Running
                && from.assigned[t] != to.assigned[t]
        }) {
            out.push("I1");
        }
        if action == DISPATCH && from.lock == Lock::Held {
            out.push("LockExclusion");
        }
        if action == EDIT {
            let incoming = |s: &ExtendedState, t: usize| -> BTreeSet<u8> {
                s.edges
                    .iter()
                    .filter(|e| e.1 as usize == t)
                    .map(|e| e.0)
                    .collect()
            };
            let locality = (0..n).all(|t| {
                from.status[t] == TaskStatus::Pending
                    || (incoming(from, t) == incoming(to, t)
                        && (to.status[t] == from.status[t]
                            || from.status[t] == TaskStatus::Running))
            });
            if !locality {
                out.push("I3");
            }
            // Folding before or after the edit must give the same state.
            let event = from.queue[0];
            let mut synced = from.clone();
            synced.queue.remove(0);
            Self::fold(&mut synced, event);
            let commuted = self
                .candidate_deltas(&synced)
                .iter()
                .filter_map(|d| self.apply(&synced, d))
                .any(|n| &n == to);
            if !commuted {
                out.push("EditSyncConfluence");
            }
        }
        out
    }
}
