//! Discrete-event simulator for video delivery over a shared bottleneck,
//! comparing per-GoP ECN-driven rate adaptation alone against rate
//! adaptation combined with measurement-based admission at the network edge.

pub mod admission;
pub mod config;
pub mod engine;
pub mod media;
pub mod network;
pub mod qoe;
pub mod report;
pub mod scenario;
pub mod source;

pub use admission::{Decision, Mode};
pub use config::{ConfigError, ScenarioConfig};
pub use report::{emit_reports, ReportError};
pub use scenario::{run_one, run_scenario, sweep, RunReport, ScenarioError};
