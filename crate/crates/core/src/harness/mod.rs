//! Run orchestration: configuration, the episode loop, suites, persistence
//! and result emission.

pub mod config;
pub mod episode;
pub mod plot;
pub mod record;
pub mod report;
pub mod suite;

pub use config::{ExperimentConfig, Method};
pub use episode::{cross_task_loop, run_episode, CrossTaskResult, EpisodeResult};
pub use record::{read_run_log, write_run_log, RunLogHeader, RunRecord};
pub use suite::{run_suite, CellResult, SuiteResults};
