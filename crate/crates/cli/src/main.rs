//! `constellation`: validate constellations, run them in the simulated
//! device world, and explore the lock protocol's state space. Machine
//! output goes to stdout as JSON lines; human-readable logs only to files.

mod config;
mod explore;
mod run;
mod validate;

use std::io::Write;
use std::path::PathBuf;

use clap::{ArgGroup, Parser, Subcommand};
use serde_json::{json, Value};

use config::CliConfig;
use explore::{cmd_explore, ExploreArgs, Mode};
use run::{bundled_scenario, cmd_run, RunArgs, Source};
use validate::cmd_validate;

/// Process exit codes. Each is a pure function of the inputs and the seed.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVALID: i32 = 1;
    /// Unreadable input, or a usage error.
    pub const PARSE: i32 = 2;
    pub const PARTIAL: i32 = 3;
    pub const FAILED: i32 = 4;
    pub const VERDICT_MISMATCH: i32 = 5;
    pub const GOLDEN_MISMATCH: i32 = 6;
    pub const BOUND_EXCEEDED: i32 = 7;
    pub const INVARIANT_VIOLATION: i32 = 8;
}

/// Writes one JSON line to stdout.
pub fn emit(v: Value) {
    let mut out = std::io::stdout().lock();
    // A closed pipe is the reader's choice, not an error worth reporting.
    let _ = writeln!(out, "{v}");
}

#[derive(Debug, Parser)]
#[command(name = "constellation", version, about)]
struct Cli {
    /// TOML file with engine, heartbeat and backoff overrides.
    #[arg(long, global = true, env = "CONSTELLATION_CONFIG")]
    config: Option<PathBuf>,
    /// Diagnostics level on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "CONSTELLATION_LOG_LEVEL")]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a constellation document; exit 0 if valid, 1 if not, 2 if unreadable.
    Validate { path: PathBuf },
    /// Run a fault scenario or a constellation under simulation.
    #[command(group(ArgGroup::new("source").required(true).args(["scenario", "scenario_file", "constellation"])))]
    Run {
        /// Bundled scenario number.
        #[arg(long, env = "CONSTELLATION_SCENARIO", value_parser = clap::value_parser!(u32).range(1..=3))]
        scenario: Option<u32>,
        /// Scenario definition file.
        #[arg(long, env = "CONSTELLATION_SCENARIO_FILE")]
        scenario_file: Option<PathBuf>,
        /// Constellation document to run as given.
        #[arg(long, env = "CONSTELLATION_CONSTELLATION", requires = "planner_script")]
        constellation: Option<PathBuf>,
        /// Planner script for `--constellation`.
        #[arg(long, env = "CONSTELLATION_PLANNER_SCRIPT")]
        planner_script: Option<PathBuf>,
        #[arg(long, env = "CONSTELLATION_SEED")]
        seed: u64,
        /// Directory for report.json, log.md, metrics.json and verdict.json.
        #[arg(long, env = "CONSTELLATION_OUT")]
        out: Option<PathBuf>,
        /// Where to write the Markdown log.
        #[arg(long, env = "CONSTELLATION_LOG")]
        log: Option<PathBuf>,
    },
    /// Explore the lock protocol's reachable states.
    Explore {
        #[arg(
            long,
            value_enum,
            default_value = "tla-mirror",
            env = "CONSTELLATION_MODE"
        )]
        mode: Mode,
        /// Compare the statistics with the reference checker's.
        #[arg(long, env = "CONSTELLATION_CHECK_GOLDEN")]
        check_golden: bool,
        #[arg(long, default_value_t = 1_000_000, env = "CONSTELLATION_MAX_STATES")]
        max_states: usize,
        /// Visit successors in reverse declaration order.
        #[arg(long)]
        reversed: bool,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        queue_bound: Option<usize>,
        /// Also write the statistics to this file.
        #[arg(long, env = "CONSTELLATION_REPORT")]
        report: Option<PathBuf>,
    },
}

fn init_tracing(level: &str) {
    let filter = tracing_subscriber::filter::LevelFilter::from_level(
        level.parse().unwrap_or(tracing::Level::WARN),
    );
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(filter)
        .try_init();
}

fn execute(cli: Cli) -> anyhow::Result<i32> {
    let config = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    init_tracing(
        cli.log_level
            .as_deref()
            .or(config.log_level.as_deref())
            .unwrap_or("warn"),
    );
    match cli.command {
        Command::Validate { path } => Ok(cmd_validate(&path)),
        Command::Run {
            scenario,
            scenario_file,
            constellation,
            planner_script,
            seed,
            out,
            log,
        } => {
            let source = match (scenario, scenario_file, constellation) {
                (Some(n), _, _) => Source::Scenario(bundled_scenario(n)),
                (_, Some(f), _) => Source::Scenario(f),
                (_, _, Some(c)) => Source::Constellation {
                    constellation: c,
                    planner_script: planner_script.expect("clap enforces --planner-script"),
                },
                _ => unreachable!("clap requires one source"),
            };
            cmd_run(
                RunArgs {
                    source,
                    seed,
                    out,
                    log,
                },
                &config,
            )
        }
        Command::Explore {
            mode,
            check_golden,
            max_states,
            reversed,
            tasks,
            devices,
            queue_bound,
            report,
        } => cmd_explore(ExploreArgs {
            mode,
            check_golden,
            max_states,
            reversed,
            tasks,
            devices,
            queue_bound,
            report,
        }),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            emit(json!({"type": "error", "error": format!("{e:#}")}));
            exit::PARSE
        }
    };
    std::process::exit(code);
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn run_requires_a_seed_and_a_source() {
        assert!(Cli::try_parse_from(["constellation", "run", "--scenario", "1"]).is_err());
        assert!(Cli::try_parse_from(["constellation", "run", "--seed", "0"]).is_err());
        assert!(
            Cli::try_parse_from(["constellation", "run", "--scenario", "4", "--seed", "0"])
                .is_err()
        );
        assert!(Cli::try_parse_from([
            "constellation",
            "run",
            "--constellation",
            "f.json",
            "--seed",
            "0"
        ])
        .is_err());
        assert!(
            Cli::try_parse_from(["constellation", "run", "--scenario", "2", "--seed", "0"]).is_ok()
        );
    }
}
