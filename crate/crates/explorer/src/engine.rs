//! Breadth-first explicit-state search with TLC-style accounting.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Debug;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One enumerated successor. `action` indexes [`Model::actions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Successor<S> {
    pub action: usize,
    pub state: S,
}

/// A transition system the explorer can search.
pub trait Model {
    type State: Clone + Eq + Hash + Debug;

    /// Action names in attribution order. Index 0 names the initial
    /// predicate.
    fn actions(&self) -> &'static [&'static str];

    fn initial_states(&self) -> Vec<Self::State>;

    /// Appends every successor of `s`, including ones the state constraint
    /// will discard, in attribution order.
    fn successors(&self, s: &Self::State, out: &mut Vec<Successor<Self::State>>);

    /// State constraint. Successors failing it are counted as generated and
    /// then dropped, never expanded.
    fn constraint(&self, _s: &Self::State) -> bool {
        true
    }

    /// Names of the state invariants `s` violates.
    fn check_state(&self, s: &Self::State) -> Vec<&'static str>;

    /// Names of the action invariants violated by the step `from -> to`.
    fn check_step(
        &self,
        _from: &Self::State,
        _action: usize,
        _to: &Self::State,
    ) -> Vec<&'static str> {
        Vec::new()
    }

    /// Human-readable rendering used in witness paths.
    fn render(&self, s: &Self::State) -> String {
        format!("{s:?}")
    }
}

/// Order in which each state's successors are visited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessorOrder {
    #[default]
    Declared,
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    /// Abort once more distinct states than this have been discovered.
    pub max_states: usize,
    pub order: SuccessorOrder,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            max_states: 1_000_000,
            order: SuccessorOrder::Declared,
        }
    }
}

/// Search statistics. `states_generated` counts the initial states plus every
/// successor computation, duplicates, stutters and constraint-rejected states
/// included. Depth counts the initial level as 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreStats {
    pub states_generated: u64,
    pub distinct_states: u64,
    pub bfs_depth: u32,
    /// Newly discovered states per action, in attribution order.
    pub first_discovery: Vec<ActionCount>,
    pub invariant_violations: u64,
    pub deadlocked_states: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCount {
    pub action: String,
    pub count: u64,
}

impl ExploreStats {
    pub fn discovered_by(&self, action: &str) -> u64 {
        self.first_discovery
            .iter()
            .find(|a| a.action == action)
            .map_or(0, |a| a.count)
    }

    pub fn first_discovery_map(&self) -> BTreeMap<String, u64> {
        self.first_discovery
            .iter()
            .map(|a| (a.action.clone(), a.count))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessStep {
    pub action: String,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error("more than {limit} distinct states")]
    BoundExceeded { limit: usize },
    /// `witness` runs from an initial state to `state`; its length is minimal
    /// because the search is breadth-first.
    #[error("invariant {invariant} violated after {} steps", witness.len().saturating_sub(1))]
    InvariantViolation {
        invariant: String,
        state: String,
        witness: Vec<WitnessStep>,
    },
}

/// Result of a completed search, with the reachable set in discovery order.
#[derive(Debug, Clone)]
pub struct Exploration<S> {
    pub stats: ExploreStats,
    pub states: Vec<S>,
}

pub fn explore<M: Model>(model: &M, bounds: Bounds) -> Result<ExploreStats, ExploreError> {
    explore_states(model, bounds).map(|e| e.stats)
}

pub fn explore_states<M: Model>(
    model: &M,
    bounds: Bounds,
) -> Result<Exploration<M::State>, ExploreError> {
    let actions = model.actions();
    let mut discovered = vec![0u64; actions.len()];
    let mut states: Vec<M::State> = Vec::new();
    // Per state: (parent index, action index, depth).
    let mut meta: Vec<(Option<usize>, usize, u32)> = Vec::new();
    let mut index: HashMap<M::State, usize> = HashMap::new();
    let mut generated = 0u64;
    let mut deadlocks = 0u64;

    let violation =
        |states: &[M::State], meta: &[(Option<usize>, usize, u32)], at: usize, invariant: &str| {
            let mut witness = Vec::new();
            let mut cur = Some(at);
            while let Some(i) = cur {
                witness.push(WitnessStep {
                    action: actions[meta[i].1].to_owned(),
                    state: model.render(&states[i]),
                });
                cur = meta[i].0;
            }
            witness.reverse();
            ExploreError::InvariantViolation {
                invariant: invariant.to_owned(),
                state: model.render(&states[at]),
                witness,
            }
        };

    for s in model.initial_states() {
        generated += 1;
        if !model.constraint(&s) || index.contains_key(&s) {
            continue;
        }
        let i = states.len();
        index.insert(s.clone(), i);
        states.push(s);
        meta.push((None, 0, 1));
        discovered[0] += 1;
        if let Some(inv) = model.check_state(&states[i]).first() {
            return Err(violation(&states, &meta, i, inv));
        }
    }

    let mut buf = Vec::new();
    let mut head = 0;
    while head < states.len() {
        let cur = head;
        head += 1;
        buf.clear();
        model.successors(&states[cur], &mut buf);
        if bounds.order == SuccessorOrder::Reversed {
            buf.reverse();
        }
        let mut admissible = 0usize;
        for Successor { action, state } in buf.drain(..) {
            generated += 1;
            if !model.constraint(&state) {
                continue;
            }
            admissible += 1;
            if let Some(inv) = model.check_step(&states[cur], action, &state).first() {
                let i = states.len();
                states.push(state);
                meta.push((Some(cur), action, meta[cur].2 + 1));
                return Err(violation(&states, &meta, i, inv));
            }
            if index.contains_key(&state) {
                continue;
            }
            if states.len() >= bounds.max_states {
                return Err(ExploreError::BoundExceeded {
                    limit: bounds.max_states,
                });
            }
            let i = states.len();
            index.insert(state.clone(), i);
            states.push(state);
            meta.push((Some(cur), action, meta[cur].2 + 1));
            discovered[action] += 1;
            if let Some(inv) = model.check_state(&states[i]).first() {
                return Err(violation(&states, &meta, i, inv));
            }
        }
        if admissible == 0 {
            deadlocks += 1;
        }
    }

    let stats = ExploreStats {
        states_generated: generated,
        distinct_states: states.len() as u64,
        bfs_depth: meta.iter().map(|m| m.2).max().unwrap_or(0),
        first_discovery: actions
            .iter()
            .zip(&discovered)
            .map(|(a, &count)| ActionCount {
                action: (*a).to_owned(),
                count,
            })
            .collect(),
        invariant_violations: 0,
        deadlocked_states: deadlocks,
    };
    Ok(Exploration { stats, states })
}
