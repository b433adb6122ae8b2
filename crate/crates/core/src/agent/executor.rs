//! Command executors. The scripted executor looks commands up in a glob
//! table and reports a virtual duration; the shell executor (feature
//! `real-shell`) runs commands for real inside an allowlisted directory.

use glob::Pattern;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::aip::message::{ActionResult, ActionStatus, Command};
use crate::aip::profile::ProfileFragment;
use crate::time::SimDuration;

pub const EXEC_CLI: &str = "EXEC_CLI";
pub const SYS_INFO: &str = "SYS_INFO";
pub const NOTEPAD_WRITE: &str = "NOTEPAD_WRITE";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("no script entry for {function} `{key}`")]
    NoScriptEntry { function: String, key: String },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("command timed out after {0}")]
    Timeout(SimDuration),
    #[error("invalid script: {0}")]
    InvalidScript(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub result: ActionResult,
    pub duration: SimDuration,
}

pub trait Executor {
    /// Runs one command. `telemetry` is the host snapshot used for
    /// `SYS_INFO`.
    fn execute(
        &mut self,
        command: &Command,
        telemetry: &ProfileFragment,
    ) -> Result<ExecOutcome, ExecError>;
}

/// The host snapshot returned by `SYS_INFO`.
pub fn sys_info(telemetry: &ProfileFragment) -> Value {
    let perf = telemetry.performance.clone().unwrap_or_default();
    json!({
        "os": telemetry.os,
        "os_version": telemetry.os_version,
        "cpu_cores": perf.cpu_cores,
        "memory_gb": perf.memory_gb,
        "gpus": perf.gpus,
        "disk_gb": perf.disk_gb,
    })
}

/// The string a scripted entry is matched against: the command line for
/// `EXEC_CLI`, the `text` argument for text tools, empty otherwise.
pub fn match_key(command: &Command) -> &str {
    command
        .str_arg("command")
        .or_else(|| command.str_arg("text"))
        .unwrap_or("")
}

fn default_function() -> String {
    EXEC_CLI.to_owned()
}

fn default_pattern() -> String {
    "*".to_owned()
}

fn success() -> ActionStatus {
    ActionStatus::Success
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecEntry {
    #[serde(default = "default_function")]
    pub function: String,
    #[serde(default = "default_pattern")]
    pub pattern: String,
    #[serde(default = "success")]
    pub status: ActionStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub duration_s: f64,
    /// When set, stdout is the value of this argument (a write tool echoing
    /// what it wrote).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_argument: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorScript {
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub entries: Vec<ExecEntry>,
}

/// Table-driven executor; the first entry whose function matches and whose
/// glob matches the command's key wins.
#[derive(Debug, Clone)]
pub struct ScriptedExecutor {
    strict: bool,
    entries: Vec<(Pattern, ExecEntry)>,
}

impl ScriptedExecutor {
    pub fn new(script: ExecutorScript) -> Result<Self, ExecError> {
        let entries = script
            .entries
            .into_iter()
            .map(|e| {
                Pattern::new(&e.pattern)
                    .map(|p| (p, e.clone()))
                    .map_err(|err| ExecError::InvalidScript(format!("`{}`: {err}", e.pattern)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            strict: script.strict,
            entries,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ExecError> {
        let script: ExecutorScript =
            serde_json::from_str(text).map_err(|e| ExecError::InvalidScript(e.to_string()))?;
        Self::new(script)
    }
}

impl Executor for ScriptedExecutor {
    fn execute(
        &mut self,
        command: &Command,
        telemetry: &ProfileFragment,
    ) -> Result<ExecOutcome, ExecError> {
        let key = match_key(command);
        let entry = self
            .entries
            .iter()
            .find(|(p, e)| e.function == command.function && p.matches(key))
            .map(|(_, e)| e);
        let Some(entry) = entry else {
            if command.function == SYS_INFO {
                let mut r = ActionResult::ok(&command.id, "");
                r.info = Some(sys_info(telemetry));
                return Ok(ExecOutcome {
                    result: r,
                    duration: SimDuration::ZERO,
                });
            }
            if self.strict {
                return Err(ExecError::NoScriptEntry {
                    function: command.function.clone(),
                    key: key.to_owned(),
                });
            }
            return Ok(ExecOutcome {
                result: ActionResult::ok(&command.id, ""),
                duration: SimDuration::ZERO,
            });
        };
        let stdout = match &entry.echo_argument {
            Some(arg) => command.str_arg(arg).unwrap_or("").to_owned(),
            None => entry.stdout.clone(),
        };
        let ok = entry.status == ActionStatus::Success;
        let result = ActionResult {
            command_id: command.id.clone(),
            status: entry.status,
            return_code: Some(if ok { 0 } else { 1 }),
            stdout,
            stderr: entry.stderr.clone(),
            info: (command.function == SYS_INFO).then(|| sys_info(telemetry)),
            error: (!ok).then(|| {
                if entry.stderr.is_empty() {
                    format!("`{key}` failed")
                } else {
                    entry.stderr.clone()
                }
            }),
        };
        Ok(ExecOutcome {
            result,
            duration: SimDuration::from_secs(entry.duration_s.max(0.0)),
        })
    }
}

#[cfg(feature = "real-shell")]
pub use shell::ShellExecutor;

#[cfg(feature = "real-shell")]
mod shell {
    use std::io::Read;
    use std::path::{Path, PathBuf};
    use std::process::{Command as Process, Stdio};
    use std::time::{Duration, Instant};

    use super::*;

    /// Runs `EXEC_CLI` through `sh -c` in a working directory that must lie
    /// inside one of the allowlisted roots.
    #[derive(Debug, Clone)]
    pub struct ShellExecutor {
        workdir: PathBuf,
        timeout: Duration,
    }

    impl ShellExecutor {
        pub fn new(
            workdir: &Path,
            allowlist: &[PathBuf],
            timeout: Duration,
        ) -> Result<Self, ExecError> {
            let workdir = workdir
                .canonicalize()
                .map_err(|e| ExecError::InvalidScript(format!("workdir: {e}")))?;
            let allowed = allowlist.iter().any(|root| {
                root.canonicalize()
                    .map(|r| workdir.starts_with(r))
                    .unwrap_or(false)
            });
            if !allowed {
                return Err(ExecError::InvalidScript(format!(
                    "{} is outside the allowlist",
                    workdir.display()
                )));
            }
            Ok(Self { workdir, timeout })
        }
    }

    impl Executor for ShellExecutor {
        fn execute(
            &mut self,
            command: &Command,
            telemetry: &ProfileFragment,
        ) -> Result<ExecOutcome, ExecError> {
            match command.function.as_str() {
                SYS_INFO => {
                    let mut r = ActionResult::ok(&command.id, "");
                    r.info = Some(sys_info(telemetry));
                    Ok(ExecOutcome {
                        result: r,
                        duration: SimDuration::ZERO,
                    })
                }
                EXEC_CLI => {
                    let line = command.str_arg("command").unwrap_or("");
                    let started = Instant::now();
                    let mut child = Process::new("sh")
                        .arg("-c")
                        .arg(line)
                        .current_dir(&self.workdir)
                        .stdout(Stdio::piped())
                        .stderr(Stdio::piped())
                        .spawn()
                        .map_err(|e| ExecError::InvalidScript(e.to_string()))?;
                    let status = loop {
                        if let Some(s) = child
                            .try_wait()
                            .map_err(|e| ExecError::InvalidScript(e.to_string()))?
                        {
                            break s;
                        }
                        if started.elapsed() > self.timeout {
                            let _ = child.kill();
                            let _ = child.wait();
                            return Err(ExecError::Timeout(SimDuration::from_secs(
                                self.timeout.as_secs_f64(),
                            )));
                        }
                        std::thread::sleep(Duration::from_millis(5));
                    };
                    let mut stdout = String::new();
                    let mut stderr = String::new();
                    if let Some(mut o) = child.stdout.take() {
                        let _ = o.read_to_string(&mut stdout);
                    }
                    if let Some(mut e) = child.stderr.take() {
                        let _ = e.read_to_string(&mut stderr);
                    }
                    let ok = status.success();
                    Ok(ExecOutcome {
                        result: ActionResult {
                            command_id: command.id.clone(),
                            status: if ok {
                                ActionStatus::Success
                            } else {
                                ActionStatus::Failure
                            },
                            return_code: status.code(),
                            stdout,
                            error: (!ok).then(|| stderr.clone()),
                            stderr,
                            info: None,
                        },
                        duration: SimDuration::from_secs(started.elapsed().as_secs_f64()),
                    })
                }
                other => Err(ExecError::UnknownFunction(other.to_owned())),
            }
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn echo_runs_in_sandbox() {
            let dir = std::env::temp_dir();
            let mut ex = ShellExecutor::new(&dir, &[dir.clone()], Duration::from_secs(5)).unwrap();
            let out = ex
                .execute(
                    &Command::new("c", EXEC_CLI).arg("command", "echo hi"),
                    &ProfileFragment::default(),
                )
                .unwrap();
            assert_eq!(out.result.stdout, "hi\n");
            assert!(ShellExecutor::new(&dir, &[], Duration::from_secs(1)).is_err());
        }
    }
}
