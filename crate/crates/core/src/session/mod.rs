//! Closed-loop sessions: configuration, the step loop and the NDJSON log.

pub mod config;
pub mod log;
pub mod runner;

pub use config::{ResolvedScenario, ScenarioConfig, SessionConfig, UserConfig};
pub use log::{parse_log, read_log, write_log, LogRecord, Outcome, OutcomeReason, PlantState, TrajectoryLog};
pub use runner::{run_session, run_trials, Frame, Session, StepStatus};
