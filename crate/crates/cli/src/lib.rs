//! Scenario loading and experiment orchestration for the `netprobe` binary.

pub mod experiment;
pub mod scenario;

pub use experiment::{execute, run_scenario, sweep, RunOutcome, RunStatus, SweepParam};
pub use scenario::Scenario;
