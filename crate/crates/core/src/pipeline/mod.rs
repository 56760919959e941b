//! Iterative driver: configuration, Stage I/II orchestration, persistence,
//! reporting and the command-line interface.

pub mod cli;
pub mod config;
pub mod report;
pub mod run;
pub mod stage2;

pub use config::{ModalityMode, RunConfig, TrialConfig};
pub use report::{ReportLine, ReportRow, RunReport};
pub use run::{run_full, run_iteration, run_stage1, Models, RunDir, RunOutput};
pub use stage2::{LrDecay, Stage2Epoch, Stage2Hyper};
