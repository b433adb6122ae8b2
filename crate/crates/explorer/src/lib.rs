//! Exhaustive breadth-first exploration of the orchestrator's lock protocol.
//!
//! [`mirror`] transcribes the abstract model with stubbed graph edits and
//! reproduces the reference checker's statistics exactly. [`extended`] runs
//! the same protocol over real constellations. Both go through the generic
//! [`engine`].

pub mod engine;
pub mod extended;
pub mod mirror;

pub use engine::{
    explore, explore_states, ActionCount, Bounds, ExploreError, ExploreStats, Model,
    SuccessorOrder, WitnessStep,
};
pub use extended::{ExtendedConfig, ExtendedModel};
pub use mirror::{golden_mismatches, MirrorConfig, MirrorModel, Mutations, GOLDEN};
