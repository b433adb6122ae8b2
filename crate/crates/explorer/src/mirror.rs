//! Direct transcription of the orchestrator's abstract lock protocol, with
//! `Apply` and `Synchronize` stubbed to identities and the acyclicity check
//! stubbed to true. The graph is a constant of the model, so it is kept in
//! [`MirrorConfig`] rather than in each state.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{ExploreStats, Model, Successor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Status {
    Pending,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lock {
    Free,
    Held,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    TaskCompleted,
    TaskFailed,
}

/// Injected bugs, used to confirm the checker notices them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutations {
    /// Drop the `LockFree` guard from `Dispatch`.
    pub dispatch_while_held: bool,
    /// Drop the `A[t] = NULL` and `PENDING` guards, so a running task can be
    /// dispatched again to another device.
    pub redispatch_running: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorConfig {
    pub tasks: usize,
    pub devices: usize,
    pub queue_bound: usize,
    /// Constant edge set `(from, to)` over task indices.
    pub edges: Vec<(usize, usize)>,
    pub mutations: Mutations,
}

impl Default for MirrorConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            devices: 3,
            queue_bound: 2,
            edges: Vec::new(),
            mutations: Mutations::default(),
        }
    }
}

/// `S`, `A`, `L`, `Q`, `D`. Devices are a bitmask over `0..devices`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelState {
    pub status: Vec<Status>,
    pub assigned: Vec<Option<u8>>,
    pub lock: Lock,
    pub queue: Vec<Event>,
    pub available: u16,
}

impl fmt::Display for ModelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S=[")?;
        for (i, (s, a)) in self.status.iter().zip(&self.assigned).enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            match a {
                Some(d) => write!(f, "t{i}:{s:?}@dev{d}")?,
                None => write!(f, "t{i}:{s:?}")?,
            }
        }
        write!(f, "] L={:?} Q={:?} D={{", self.lock, self.queue)?;
        let mut first = true;
        for d in 0..16 {
            if self.available & (1 << d) != 0 {
                if !first {
                    write!(f, ",")?;
                }
                first = false;
                write!(f, "dev{d}")?;
            }
        }
        write!(f, "}}")
    }
}

pub const ACTIONS: &[&str] = &[
    "Init",
    "Enqueue",
    "Acquire",
    "DrainOrNoop",
    "Release",
    "Dispatch",
    "UpdateDevices",
    "Noop",
];

const ENQUEUE: usize = 1;
const ACQUIRE: usize = 2;
const DRAIN: usize = 3;
const RELEASE: usize = 4;
const DISPATCH: usize = 5;
const UPDATE_DEVICES: usize = 6;
const NOOP: usize = 7;

/// The statistics the reference model checker reports for the default
/// configuration.
pub struct Golden {
    pub states_generated: u64,
    pub distinct_states: u64,
    pub bfs_depth: u32,
    pub first_discovery: &'static [(&'static str, u64)],
}

pub const GOLDEN: Golden = Golden {
    states_generated: 93_633,
    distinct_states: 7_168,
    bfs_depth: 8,
    first_discovery: &[
        ("Init", 1),
        ("Enqueue", 6),
        ("Acquire", 448),
        ("DrainOrNoop", 0),
        ("Release", 0),
        ("Dispatch", 441),
        ("UpdateDevices", 6_272),
        ("Noop", 0),
    ],
};

/// Field-by-field comparison against [`GOLDEN`]; empty when everything
/// matches.
pub fn golden_mismatches(stats: &ExploreStats) -> Vec<String> {
    let mut out = Vec::new();
    if stats.distinct_states != GOLDEN.distinct_states {
        out.push(format!(
            "distinct_states {} != {}",
            stats.distinct_states, GOLDEN.distinct_states
        ));
    }
    if stats.bfs_depth != GOLDEN.bfs_depth {
        out.push(format!(
            "bfs_depth {} != {}",
            stats.bfs_depth, GOLDEN.bfs_depth
        ));
    }
    if stats.states_generated != GOLDEN.states_generated {
        out.push(format!(
            "states_generated {} != {}",
            stats.states_generated, GOLDEN.states_generated
        ));
    }
    for (action, want) in GOLDEN.first_discovery {
        let got = stats.discovered_by(action);
        if got != *want {
            out.push(format!("{action} {got} != {want}"));
        }
    }
    if stats.invariant_violations != 0 {
        out.push(format!(
            "{} invariant violations",
            stats.invariant_violations
        ));
    }
    if stats.deadlocked_states != 0 {
        out.push(format!("{} deadlocked states", stats.deadlocked_states));
    }
    out
}

#[derive(Debug, Clone)]
pub struct MirrorModel {
    cfg: MirrorConfig,
    all_devices: u16,
}

impl MirrorModel {
    pub fn new(cfg: MirrorConfig) -> Self {
        assert!(cfg.devices <= 16, "at most 16 devices");
        assert!(cfg.tasks <= u8::MAX as usize);
        let all_devices = ((1u32 << cfg.devices) - 1) as u16;
        Self { cfg, all_devices }
    }

    pub fn config(&self) -> &MirrorConfig {
        &self.cfg
    }

    pub fn initial_state(&self) -> ModelState {
        ModelState {
            status: vec![Status::Pending; self.cfg.tasks],
            assigned: vec![None; self.cfg.tasks],
            lock: Lock::Free,
            queue: Vec::new(),
            available: self.all_devices,
        }
    }

    fn ready(&self, s: &ModelState, t: usize) -> bool {
        s.status[t] == Status::Pending
            && self
                .cfg
                .edges
                .iter()
                .filter(|(_, to)| *to == t)
                .all(|(from, _)| s.status[*from] == Status::Completed)
    }

    fn is_dag(&self) -> bool {
        // Stubbed in the abstract model; the extended model checks real
        // graphs.
        true
    }

    /// `TypeOK`, `QueueBound`, `I1` and `I2` on a single state.
    pub fn check_invariants(&self, s: &ModelState) -> Vec<&'static str> {
        let mut out = Vec::new();
        let type_ok = s.status.len() == self.cfg.tasks
            && s.assigned.len() == self.cfg.tasks
            && s.assigned
                .iter()
                .all(|a| a.is_none_or(|d| (d as usize) < self.cfg.devices))
            && s.available & !self.all_devices == 0;
        if !type_ok {
            out.push("TypeOK");
        }
        if s.queue.len() > self.cfg.queue_bound {
            out.push("QueueBound");
        }
        let i1 = s.status.iter().zip(&s.assigned).all(|(st, a)| {
            *st != Status::Running || a.is_some_and(|d| (d as usize) < self.cfg.devices)
        });
        if !i1 {
            out.push("I1");
        }
        if !self.is_dag() {
            out.push("I2");
        }
        out
    }
}

impl Model for MirrorModel {
    type State = ModelState;

    fn actions(&self) -> &'static [&'static str] {
        ACTIONS
    }

    fn initial_states(&self) -> Vec<ModelState> {
        vec![self.initial_state()]
    }

    fn successors(&self, s: &ModelState, out: &mut Vec<Successor<ModelState>>) {
        let push = |out: &mut Vec<Successor<ModelState>>, action, state| {
            out.push(Successor { action, state });
        };

        for e in [Event::TaskCompleted, Event::TaskFailed] {
            let mut n = s.clone();
            n.queue.push(e);
            push(out, ENQUEUE, n);
        }

        if s.lock == Lock::Free {
            let mut n = s.clone();
            n.lock = Lock::Held;
            push(out, ACQUIRE, n);
        }

        if s.lock == Lock::Held {
            let mut n = s.clone();
            if !n.queue.is_empty() {
                // EditStep: Apply and Synchronize are identities, so only the
                // queue head is consumed.
                n.queue.remove(0);
            }
            push(out, DRAIN, n);
        }

        if s.lock == Lock::Held {
            let mut n = s.clone();
            n.lock = Lock::Free;
            push(out, RELEASE, n);
        }

        let m = self.cfg.mutations;
        if s.lock == Lock::Free || m.dispatch_while_held {
            for t in 0..self.cfg.tasks {
                let eligible = if m.redispatch_running {
                    matches!(s.status[t], Status::Pending | Status::Running)
                } else {
                    self.ready(s, t) && s.assigned[t].is_none()
                };
                if !eligible {
                    continue;
                }
                for d in 0..self.cfg.devices {
                    if s.available & (1 << d) == 0 {
                        continue;
                    }
                    let mut n = s.clone();
                    n.status[t] = Status::Running;
                    n.assigned[t] = Some(d as u8);
                    push(out, DISPATCH, n);
                }
            }
        }

        for subset in 0..=self.all_devices {
            let mut n = s.clone();
            n.available = subset;
            push(out, UPDATE_DEVICES, n);
        }

        push(out, NOOP, s.clone());
    }

    fn constraint(&self, s: &ModelState) -> bool {
        s.queue.len() <= self.cfg.queue_bound
    }

    fn check_state(&self, s: &ModelState) -> Vec<&'static str> {
        self.check_invariants(s)
    }

    /// The temporal half of I1 (a running task keeps its device) and lock
    /// exclusion (no dispatch while the lock is held).
    fn check_step(&self, from: &ModelState, action: usize, to: &ModelState) -> Vec<&'static str> {
        let mut out = Vec::new();
        let moved = (0..self.cfg.tasks).any(|t| {
            from.status[t] == Status::Running
                && to.status[t] == Status::Running
                && from.assigned[t] != to.assigned[t]
        });
        if moved {
            out.push("I1");
        }
        if action == DISPATCH && from.lock == Lock::Held {
            out.push("LockExclusion");
        }
        out
    }

    fn render(&self, s: &ModelState) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{explore, explore_states, Bounds, ExploreError, SuccessorOrder};
    use std::collections::HashSet;

    fn model() -> MirrorModel {
        MirrorModel::new(MirrorConfig::default())
    }

    fn successors(m: &MirrorModel, s: &ModelState) -> Vec<Successor<ModelState>> {
        let mut out = Vec::new();
        m.successors(s, &mut out);
        out
    }

    #[test]
    fn initial_state_shape() {
        let m = model();
        let s = m.initial_state();
        assert!(s.status.iter().all(|st| *st == Status::Pending));
        assert!(s.assigned.iter().all(Option::is_none));
        assert_eq!(s.lock, Lock::Free);
        assert!(s.queue.is_empty());
        assert_eq!(s.available, 0b111);
        assert!(m.check_invariants(&s).is_empty());
        assert!(m.ready(&s, 0));
    }

    #[test]
    fn nine_dispatches_from_init() {
        let m = model();
        let succ = successors(&m, &m.initial_state());
        let dispatch: HashSet<_> = succ
            .iter()
            .filter(|s| s.action == DISPATCH)
            .map(|s| s.state.clone())
            .collect();
        assert_eq!(dispatch.len(), 3 * 3);
    }

    #[test]
    fn edit_step_pops_head() {
        let m = model();
        let mut s = m.initial_state();
        s.lock = Lock::Held;
        s.queue = vec![Event::TaskFailed];
        let drains: Vec<_> = successors(&m, &s)
            .into_iter()
            .filter(|x| x.action == DRAIN)
            .collect();
        assert_eq!(drains.len(), 1);
        assert!(drains[0].state.queue.is_empty());
    }

    #[test]
    fn noop_is_always_enabled() {
        let m = model();
        let s = m.initial_state();
        assert!(successors(&m, &s)
            .iter()
            .any(|x| x.action == NOOP && x.state == s));
    }

    #[test]
    fn hand_built_violations() {
        let m = model();
        let mut s = m.initial_state();
        s.status[0] = Status::Running;
        assert_eq!(m.check_invariants(&s), vec!["I1"]);
        let mut s = m.initial_state();
        s.queue = vec![Event::TaskCompleted; 3];
        assert_eq!(m.check_invariants(&s), vec!["QueueBound"]);
        assert!(!m.constraint(&s));
    }

    #[test]
    fn default_model_matches_golden() {
        let stats = explore(&model(), Bounds::default()).unwrap();
        assert_eq!(golden_mismatches(&stats), Vec::<String>::new());
    }

    #[test]
    fn reachable_set_is_closed() {
        let m = model();
        let exploration = explore_states(&m, Bounds::default()).unwrap();
        let reachable: HashSet<_> = exploration.states.iter().cloned().collect();
        for s in &exploration.states {
            for succ in successors(&m, s) {
                if m.constraint(&succ.state) {
                    assert!(reachable.contains(&succ.state));
                }
            }
        }
    }

    #[test]
    fn totals_do_not_depend_on_enumeration_order() {
        let m = model();
        let a = explore(&m, Bounds::default()).unwrap();
        let b = explore(
            &m,
            Bounds {
                order: SuccessorOrder::Reversed,
                ..Bounds::default()
            },
        )
        .unwrap();
        assert_eq!(a.distinct_states, b.distinct_states);
        assert_eq!(a.states_generated, b.states_generated);
        assert_eq!(a.bfs_depth, b.bfs_depth);
        assert_eq!(a, explore(&m, Bounds::default()).unwrap());
    }

    fn mutated(mutations: Mutations) -> ExploreError {
        let m = MirrorModel::new(MirrorConfig {
            mutations,
            ..MirrorConfig::default()
        });
        explore(&m, Bounds::default()).unwrap_err()
    }

    #[test]
    fn dispatch_while_held_is_caught() {
        let err = mutated(Mutations {
            dispatch_while_held: true,
            ..Mutations::default()
        });
        let ExploreError::InvariantViolation {
            invariant, witness, ..
        } = err
        else {
            panic!("expected a violation, got {err:?}");
        };
        assert_eq!(invariant, "LockExclusion");
        let actions: Vec<_> = witness.iter().map(|w| w.action.as_str()).collect();
        assert_eq!(actions, ["Init", "Acquire", "Dispatch"]);
    }

    #[test]
    fn redispatch_is_caught() {
        let err = mutated(Mutations {
            redispatch_running: true,
            ..Mutations::default()
        });
        let ExploreError::InvariantViolation {
            invariant, witness, ..
        } = err
        else {
            panic!("expected a violation, got {err:?}");
        };
        assert_eq!(invariant, "I1");
        let actions: Vec<_> = witness.iter().map(|w| w.action.as_str()).collect();
        assert_eq!(actions, ["Init", "Dispatch", "Dispatch"]);
    }
}
