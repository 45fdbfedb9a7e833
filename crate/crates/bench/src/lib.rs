//! Experiment registry and Monte Carlo harness for the attack identifiers.

pub mod report;
pub mod run;
pub mod scenario;

pub use report::{run_bench, run_methods, BenchPlan, ARTIFACTS};
pub use run::{run_scenario, FiveNumber, Method, RunRecord, ScenarioReport, Settings, Summary};
pub use scenario::{builtin_case, find, registry, Regime, Scenario};
