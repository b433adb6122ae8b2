use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::ValueEnum;
use serde_json::json;

use constellation_explorer::{
    explore, golden_mismatches, Bounds, ExploreError, ExploreStats, ExtendedConfig, ExtendedModel,
    MirrorConfig, MirrorModel, SuccessorOrder,
};

use crate::{emit, exit};

pub const STATS_SCHEMA_ID: &str = "explore-stats/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// The abstract lock protocol with stubbed edits.
    TlaMirror,
    /// The same protocol over real constellation edits.
    Extended,
}

pub struct ExploreArgs {
    pub mode: Mode,
    pub check_golden: bool,
    pub max_states: usize,
    pub reversed: bool,
    pub tasks: Option<usize>,
    pub devices: Option<usize>,
    pub queue_bound: Option<usize>,
    pub report: Option<PathBuf>,
}

pub fn cmd_explore(args: ExploreArgs) -> anyhow::Result<i32> {
    if args.check_golden && args.mode != Mode::TlaMirror {
        bail!("--check-golden only applies to --mode tla-mirror");
    }
    let bounds = Bounds {
        max_states: args.max_states,
        order: if args.reversed {
            SuccessorOrder::Reversed
        } else {
            SuccessorOrder::Declared
        },
    };
    let result = match args.mode {
        Mode::TlaMirror => {
            let d = MirrorConfig::default();
            let cfg = MirrorConfig {
                tasks: args.tasks.unwrap_or(d.tasks),
                devices: args.devices.unwrap_or(d.devices),
                queue_bound: args.queue_bound.unwrap_or(d.queue_bound),
                ..d
            };
            explore(&MirrorModel::new(cfg), bounds)
        }
        Mode::Extended => {
            let d = ExtendedConfig::default();
            let tasks = args.tasks.unwrap_or(d.tasks);
            let cfg = ExtendedConfig {
                tasks,
                devices: args.devices.unwrap_or(d.devices),
                queue_bound: args.queue_bound.unwrap_or(d.queue_bound),
                initial_edges: d
                    .initial_edges
                    .into_iter()
                    .filter(|(a, b)| *a < tasks && *b < tasks)
                    .collect(),
            };
            explore(&ExtendedModel::new(cfg), bounds)
        }
    };
    let stats = match result {
        Ok(s) => s,
        Err(ExploreError::BoundExceeded { limit }) => {
            emit(json!({"type": "explore_error", "error": "bound_exceeded", "max_states": limit}));
            return Ok(exit::BOUND_EXCEEDED);
        }
        Err(ExploreError::InvariantViolation {
            invariant,
            state,
            witness,
        }) => {
            emit(json!({
                "type": "explore_error",
                "error": "invariant_violation",
                "invariant": invariant,
                "state": state,
                "witness": witness,
            }));
            return Ok(exit::INVARIANT_VIOLATION);
        }
    };
    emit(stats_record(&stats, args.mode));
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&stats_record(&stats, args.mode))?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    if args.check_golden {
        let diff = golden_mismatches(&stats);
        emit(json!({"type": "golden", "matched": diff.is_empty(), "mismatches": diff}));
        if !diff.is_empty() {
            return Ok(exit::GOLDEN_MISMATCH);
        }
    }
    Ok(exit::OK)
}

fn stats_record(stats: &ExploreStats, mode: Mode) -> serde_json::Value {
    let mut v = json!(stats);
    v["type"] = json!("explore");
    v["schema"] = json!(STATS_SCHEMA_ID);
    v["mode"] = json!(mode.to_possible_value().map(|p| p.get_name().to_owned()));
    v
}
