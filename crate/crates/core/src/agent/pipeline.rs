//! The per-task strategy pipeline as a resumable state machine. It never
//! performs I/O: when commands must run it returns them and waits for
//! [`TaskPipeline::resume`] with their results.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::executor::SYS_INFO;
use super::reasoner::{Reasoner, ReasonerOutput};
use super::{fsm_step, AgentFsmState, AgentMemory, MemoryEntry, StrategyKind, CLI_STRATEGY_ORDER};
use crate::aip::message::{ActionResult, Command, TaskEndBody, TaskEndStatus, TaskRequest};
use crate::constellation::FailureReason;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub step_limit: usize,
    pub strategies: Vec<StrategyKind>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            step_limit: 25,
            strategies: CLI_STRATEGY_ORDER.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineStep {
    /// Run these commands in order and resume with their results.
    Issue(Vec<Command>),
    Done(TaskEndBody),
}

#[derive(Debug, Clone, Default)]
struct Round {
    cursor: usize,
    output: Option<ReasonerOutput>,
    commands: Vec<Command>,
    results: Vec<ActionResult>,
    awaiting: bool,
}

#[derive(Debug, Clone)]
pub struct TaskPipeline {
    request: TaskRequest,
    config: PipelineConfig,
    state: AgentFsmState,
    rounds: usize,
    memory: AgentMemory,
    outputs: Vec<String>,
    round: Round,
    /// (round, strategy) in execution order.
    trace: Vec<(usize, StrategyKind)>,
    finished: bool,
}

pub(crate) fn failure_end(reason: FailureReason, error: impl Into<String>) -> TaskEndBody {
    let error = error.into();
    TaskEndBody {
        status: TaskEndStatus::Failed,
        result: Some(json!({"failure_reason": reason.as_str(), "error": error})),
        error: Some(error),
    }
}

impl TaskPipeline {
    pub fn new(request: TaskRequest, config: PipelineConfig) -> Self {
        Self {
            request,
            config,
            state: AgentFsmState::Continue,
            rounds: 0,
            memory: AgentMemory::default(),
            outputs: Vec::new(),
            round: Round::default(),
            trace: Vec::new(),
            finished: false,
        }
    }

    pub fn request(&self) -> &TaskRequest {
        &self.request
    }

    pub fn memory(&self) -> &AgentMemory {
        &self.memory
    }

    pub fn trace(&self) -> &[(usize, StrategyKind)] {
        &self.trace
    }

    pub fn state(&self) -> AgentFsmState {
        self.state
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn is_awaiting(&self) -> bool {
        self.round.awaiting
    }

    pub fn start(&mut self, reasoner: &mut dyn Reasoner) -> PipelineStep {
        if self.request.description.trim().is_empty() {
            return self.done(failure_end(
                FailureReason::ExecutionError,
                "task description is empty",
            ));
        }
        self.run(reasoner)
    }

    /// Feeds back the results of the last issued batch.
    pub fn resume(
        &mut self,
        reasoner: &mut dyn Reasoner,
        results: Vec<ActionResult>,
    ) -> PipelineStep {
        assert!(self.round.awaiting, "resume without an outstanding batch");
        self.round.awaiting = false;
        for r in &results {
            self.outputs.push(r.stdout.clone());
        }
        self.round.results.extend(results);
        self.round.cursor += 1;
        self.run(reasoner)
    }

    fn done(&mut self, end: TaskEndBody) -> PipelineStep {
        self.finished = true;
        self.state = match end.status {
            TaskEndStatus::Completed => AgentFsmState::Finish,
            TaskEndStatus::Failed => AgentFsmState::Fail,
        };
        PipelineStep::Done(end)
    }

    fn run(&mut self, reasoner: &mut dyn Reasoner) -> PipelineStep {
        loop {
            if self.finished {
                panic!("pipeline stepped after completion");
            }
            if self.round.cursor == 0 && self.rounds >= self.config.step_limit {
                return self.done(failure_end(
                    FailureReason::Timeout,
                    format!("step limit of {} rounds exceeded", self.config.step_limit),
                ));
            }
            let Some(&kind) = self.config.strategies.get(self.round.cursor) else {
                if let Some(end) = self.end_round() {
                    return self.done(end);
                }
                continue;
            };
            self.trace.push((self.rounds, kind));
            match kind {
                StrategyKind::DataCollection => {
                    let cmd = Command::new(
                        format!("{}-{}-sys", self.request.task_id, self.rounds),
                        SYS_INFO,
                    );
                    self.round.commands.push(cmd.clone());
                    self.round.awaiting = true;
                    return PipelineStep::Issue(vec![cmd]);
                }
                StrategyKind::LlmInteraction => {
                    match reasoner.propose(&self.request, self.rounds, &self.memory) {
                        Ok(out) => self.round.output = Some(out),
                        Err(e) => {
                            return self
                                .done(failure_end(FailureReason::ExecutionError, e.to_string()))
                        }
                    }
                }
                StrategyKind::ActionExecution => {
                    let cmds = self
                        .round
                        .output
                        .as_ref()
                        .map(|o| o.commands.clone())
                        .unwrap_or_default();
                    if !cmds.is_empty() {
                        self.round.commands.extend(cmds.iter().cloned());
                        self.round.awaiting = true;
                        return PipelineStep::Issue(cmds);
                    }
                }
                StrategyKind::MemoryUpdate => {
                    let (thought, next) = self.proposed();
                    self.memory.append(MemoryEntry {
                        step: self.memory.len(),
                        thought,
                        commands: self.round.commands.clone(),
                        results: self.round.results.clone(),
                        next_state: next,
                    });
                }
            }
            self.round.cursor += 1;
        }
    }

    fn proposed(&self) -> (String, AgentFsmState) {
        match &self.round.output {
            Some(o) => {
                let failed = self.round.results.iter().any(|r| !r.is_ok());
                let next = if o.fail_on_error && failed {
                    AgentFsmState::Fail
                } else {
                    o.next_state
                };
                (o.thought.clone(), next)
            }
            None => (String::new(), AgentFsmState::Continue),
        }
    }

    /// Closes the round; returns the task end if the machine reached a
    /// terminal state.
    fn end_round(&mut self) -> Option<TaskEndBody> {
        let (thought, proposed) = self.proposed();
        let step = fsm_step(self.state, proposed).expect("pipeline only steps live states");
        let round = std::mem::take(&mut self.round);
        self.rounds += 1;
        self.state = step.next_state;
        if !step.round_end {
            return None;
        }
        let output = round.output.unwrap_or(ReasonerOutput {
            thought: thought.clone(),
            commands: vec![],
            next_state: proposed,
            result: None,
            fail_on_error: false,
        });
        Some(match step.next_state {
            AgentFsmState::Finish => TaskEndBody {
                status: TaskEndStatus::Completed,
                result: Some(
                    output
                        .result
                        .unwrap_or_else(|| json!({"summary": thought, "outputs": self.outputs})),
                ),
                error: None,
            },
            _ => {
                let reason = match (&output.result, round.results.iter().find(|r| !r.is_ok())) {
                    (Some(v), _) => super::reasoner::render_result(v),
                    (None, Some(r)) => r.error.clone().unwrap_or_else(|| r.stderr.clone()),
                    (None, None) => thought,
                };
                let mut end = failure_end(FailureReason::ExecutionError, reason);
                if let Some(Value::Object(m)) = &mut end.result {
                    m.insert("outputs".into(), json!(self.outputs));
                }
                end
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::reasoner::{ReasonerScript, ScriptedReasoner};
    use super::*;

    fn request(id: &str, desc: &str) -> TaskRequest {
        TaskRequest {
            task_id: id.into(),
            name: id.into(),
            description: desc.into(),
            tips: vec![],
            inputs: vec![],
        }
    }

    fn reasoner(json: &str) -> ScriptedReasoner {
        ScriptedReasoner::new(serde_json::from_str::<ReasonerScript>(json).unwrap()).unwrap()
    }

    #[test]
    fn two_round_task_completes_and_traces_strategy_order() {
        let mut r = reasoner(
            r#"{"rules": [{"task": "*", "steps": [
                {"commands": [{"function": "EXEC_CLI", "arguments": {"command": "bash run.sh"}}], "next_state": "CONTINUE"},
                {"commands": [{"function": "EXEC_CLI", "arguments": {"command": "cat out.txt"}}], "next_state": "FINISH"}
            ]}]}"#,
        );
        let mut p = TaskPipeline::new(request("T", "run then read"), PipelineConfig::default());
        let PipelineStep::Issue(c) = p.start(&mut r) else {
            panic!()
        };
        assert_eq!(c.len(), 1);
        let PipelineStep::Issue(c) = p.resume(&mut r, vec![ActionResult::ok(&c[0].id, "ran")])
        else {
            panic!()
        };
        let PipelineStep::Done(end) = p.resume(&mut r, vec![ActionResult::ok(&c[0].id, "42")])
        else {
            panic!()
        };
        assert_eq!(end.status, TaskEndStatus::Completed);
        assert_eq!(p.rounds(), 2);
        assert_eq!(p.memory().len(), 2);
        let kinds: Vec<_> = p.trace().iter().map(|t| t.1).collect();
        assert_eq!(kinds, [CLI_STRATEGY_ORDER, CLI_STRATEGY_ORDER].concat());
        assert_eq!(end.result.unwrap()["outputs"], json!(["ran", "42"]));
    }

    #[test]
    fn scripted_fail_issues_no_commands() {
        let mut r = reasoner(
            r#"{"rules": [{"task": "*", "steps": [
                {"thought": "precondition missing", "next_state": "FAIL"}]}]}"#,
        );
        let mut p = TaskPipeline::new(request("T", "x"), PipelineConfig::default());
        let PipelineStep::Done(end) = p.start(&mut r) else {
            panic!()
        };
        assert_eq!(end.status, TaskEndStatus::Failed);
        assert_eq!(end.error.as_deref(), Some("precondition missing"));
        assert!(p.memory().results().next().is_none());
    }

    #[test]
    fn empty_description_and_step_limit() {
        let mut r = reasoner(r#"{"rules": []}"#);
        let mut p = TaskPipeline::new(request("T", " "), PipelineConfig::default());
        let PipelineStep::Done(end) = p.start(&mut r) else {
            panic!()
        };
        assert_eq!(end.result.unwrap()["failure_reason"], "EXECUTION_ERROR");

        let looping = ReasonerScript {
            strict: false,
            rules: vec![super::super::reasoner::ReasonerRule {
                task: "*".into(),
                steps: vec![serde_json::from_str(r#"{"next_state": "CONTINUE"}"#).unwrap(); 30],
            }],
        };
        let mut r = ScriptedReasoner::new(looping).unwrap();
        let mut p = TaskPipeline::new(request("T", "loop"), PipelineConfig::default());
        let PipelineStep::Done(end) = p.start(&mut r) else {
            panic!()
        };
        assert_eq!(end.result.unwrap()["failure_reason"], "TIMEOUT");
        assert_eq!(p.rounds(), 25);
    }

    #[test]
    fn fail_on_error_turns_failed_action_into_fail() {
        let mut r = reasoner(
            r#"{"rules": [{"task": "*", "steps": [
                {"commands": [{"function": "EXEC_CLI", "arguments": {"command": "false"}}],
                 "next_state": "FINISH", "fail_on_error": true}]}]}"#,
        );
        let mut p = TaskPipeline::new(request("T", "x"), PipelineConfig::default());
        let PipelineStep::Issue(c) = p.start(&mut r) else {
            panic!()
        };
        let PipelineStep::Done(end) =
            p.resume(&mut r, vec![ActionResult::failed(&c[0].id, "exit 1")])
        else {
            panic!()
        };
        assert_eq!(end.status, TaskEndStatus::Failed);
        assert_eq!(end.error.as_deref(), Some("exit 1"));
    }
}
