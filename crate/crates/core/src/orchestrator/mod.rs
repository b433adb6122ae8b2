//! Event-driven execution of a constellation under the safe-assignment lock.

pub mod dispatch;
pub mod engine;
pub mod event;
pub mod report;
pub mod sync;

pub use dispatch::{
    Availability, DispatchError, DispatchRequest, Dispatcher, Progress, ScriptedDispatcher,
    ScriptedOutcome, TaskOutcome, UpstreamInput,
};
pub use engine::{run, EngineConfig, Lock, Orchestrator, RunInput};
pub use event::{EventBus, EventKind, OrchestratorEvent};
pub use report::{RunOutcome, RunReport, TaskTiming};
pub use sync::{locality_violations, synchronize, SyncIssue};
