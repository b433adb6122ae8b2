//! Device agents: a server that owns the task state machine and a client that
//! only executes commands. The server's per-task pipeline runs the
//! reasoning, execution and memory strategies each round and decides every
//! state transition.

pub mod client;
pub mod executor;
pub mod pipeline;
pub mod reasoner;
pub mod serve;
pub mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aip::message::{ActionResult, Command};

pub use client::DeviceClient;
pub use executor::{ExecError, ExecOutcome, Executor, ExecutorScript, ScriptedExecutor};
pub use pipeline::{PipelineConfig, PipelineStep, TaskPipeline};
pub use reasoner::{Reasoner, ReasonerOutput, ReasonerScript, ScriptedReasoner};
pub use serve::{serve_task, ServeError};
pub use server::DeviceAgentServer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentFsmState {
    Continue,
    Finish,
    Fail,
}

impl AgentFsmState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, AgentFsmState::Continue)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyKind {
    DataCollection,
    LlmInteraction,
    ActionExecution,
    MemoryUpdate,
}

/// Default strategy order for a command-line agent. It gathers context by
/// issuing commands, so there is no separate collection phase.
pub const CLI_STRATEGY_ORDER: [StrategyKind; 3] = [
    StrategyKind::LlmInteraction,
    StrategyKind::ActionExecution,
    StrategyKind::MemoryUpdate,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal agent transition from {from:?}")]
pub struct IllegalTransition {
    pub from: AgentFsmState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsmStep {
    pub next_state: AgentFsmState,
    pub round_end: bool,
}

/// One state-machine step: terminal states cannot be stepped, and a round
/// ends exactly when the next state is terminal.
pub fn fsm_step(
    state: AgentFsmState,
    proposed: AgentFsmState,
) -> Result<FsmStep, IllegalTransition> {
    if state.is_terminal() {
        return Err(IllegalTransition { from: state });
    }
    Ok(FsmStep {
        next_state: proposed,
        round_end: proposed.is_terminal(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub step: usize,
    pub thought: String,
    pub commands: Vec<Command>,
    pub results: Vec<ActionResult>,
    pub next_state: AgentFsmState,
}

/// Append-only record of one task's rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentMemory {
    entries: Vec<MemoryEntry>,
}

impl AgentMemory {
    pub fn append(&mut self, entry: MemoryEntry) {
        debug_assert_eq!(entry.step, self.entries.len());
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every action result so far, oldest first.
    pub fn results(&self) -> impl Iterator<Item = &ActionResult> {
        self.entries.iter().flat_map(|e| e.results.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fsm_step_cases() {
        assert_eq!(
            fsm_step(AgentFsmState::Continue, AgentFsmState::Finish),
            Ok(FsmStep {
                next_state: AgentFsmState::Finish,
                round_end: true
            })
        );
        assert!(
            !fsm_step(AgentFsmState::Continue, AgentFsmState::Continue)
                .unwrap()
                .round_end
        );
        assert!(fsm_step(AgentFsmState::Finish, AgentFsmState::Continue).is_err());
    }
}
