//! Deterministic simulation: virtual clock, links with outages, the device
//! world behind the dispatcher, fault scenarios, metrics and run logs.

pub mod clock;
pub mod markdown;
pub mod metrics;
pub mod network;
pub mod scenario;
pub mod world;

pub use markdown::{emit_markdown_log, mermaid};
pub use metrics::{compute_metrics, dag_metrics, peak_overlap, MetricsError, ParallelismMetrics};
pub use network::{Latency, Link, LinkError, LinkSpec, Outage};
pub use scenario::{
    load_world, run_scenario, simulate, Check, Expectation, Scenario, ScenarioError, ScenarioFile,
    ScenarioRun, SimRun, Verdict, VerdictMismatch, BUNDLED_SCENARIO_DIR, TIMING_MARKER,
};
pub use world::{DeviceReport, DeviceSpec, SimWorld, WorldError, WorldSpec};
