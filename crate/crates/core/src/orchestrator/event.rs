use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::constellation::{FailureReason, TaskId};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    TaskStarted,
    TaskCompleted,
    TaskFailed,
    ConstellationModified,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::TaskStarted => "TASK_STARTED",
            EventKind::TaskCompleted => "TASK_COMPLETED",
            EventKind::TaskFailed => "TASK_FAILED",
            EventKind::ConstellationModified => "CONSTELLATION_MODIFIED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EventKind::TaskStarted,
            EventKind::TaskCompleted,
            EventKind::TaskFailed,
            EventKind::ConstellationModified,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorEvent {
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    /// Result or error for terminal events, device for `TASK_STARTED`, change
    /// summary for `CONSTELLATION_MODIFIED`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<FailureReason>,
    pub timestamp: SimTime,
}

impl OrchestratorEvent {
    pub fn new(kind: EventKind, task_id: Option<TaskId>, timestamp: SimTime) -> Self {
        Self {
            kind,
            task_id,
            payload: None,
            failure_reason: None,
            timestamp,
        }
    }

    pub fn with_payload(mut self, payload: Option<Value>) -> Self {
        self.payload = payload;
        self
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, EventKind::TaskCompleted | EventKind::TaskFailed)
    }
}

type Handler = Box<dyn FnMut(&OrchestratorEvent) -> Result<(), String>>;

/// Observer registry. Handlers run synchronously in subscription order; a
/// failing handler is logged and counted, never propagated.
#[derive(Default)]
pub struct EventBus {
    handlers: Vec<(Option<EventKind>, Handler)>,
    handler_failures: usize,
}

impl fmt::Debug for EventBus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventBus")
            .field("handlers", &self.handlers.len())
            .field("handler_failures", &self.handler_failures)
            .finish()
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Subscribes to one kind, or to every kind when `kind` is `None`.
    pub fn subscribe<F>(&mut self, kind: Option<EventKind>, handler: F)
    where
        F: FnMut(&OrchestratorEvent) -> Result<(), String> + 'static,
    {
        self.handlers.push((kind, Box::new(handler)));
    }

    pub fn publish(&mut self, event: &OrchestratorEvent) {
        for (kind, handler) in &mut self.handlers {
            if kind.is_some_and(|k| k != event.kind) {
                continue;
            }
            if let Err(err) = handler(event) {
                self.handler_failures += 1;
                tracing::warn!(kind = %event.kind, %err, "event handler failed");
            }
        }
    }

    pub fn handler_failures(&self) -> usize {
        self.handler_failures
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::rc::Rc;

    #[test]
    fn handlers_run_in_order_and_failures_are_contained() {
        let seen = Rc::new(RefCell::new(Vec::new()));
        let mut bus = EventBus::new();
        let s1 = seen.clone();
        bus.subscribe(Some(EventKind::TaskCompleted), move |e| {
            s1.borrow_mut().push(format!("first:{}", e.kind));
            Err("boom".into())
        });
        let s2 = seen.clone();
        bus.subscribe(None, move |e| {
            s2.borrow_mut().push(format!("second:{}", e.kind));
            Ok(())
        });
        bus.publish(&OrchestratorEvent::new(
            EventKind::TaskCompleted,
            Some("A".into()),
            SimTime::ZERO,
        ));
        bus.publish(&OrchestratorEvent::new(
            EventKind::TaskStarted,
            Some("A".into()),
            SimTime::ZERO,
        ));
        assert_eq!(
            *seen.borrow(),
            [
                "first:TASK_COMPLETED",
                "second:TASK_COMPLETED",
                "second:TASK_STARTED"
            ]
        );
        assert_eq!(bus.handler_failures(), 1);
    }

    #[test]
    fn publish_without_subscribers_is_a_noop() {
        let mut bus = EventBus::new();
        bus.publish(&OrchestratorEvent::new(
            EventKind::ConstellationModified,
            None,
            SimTime::ZERO,
        ));
        assert_eq!(bus.handler_failures(), 0);
    }
}
