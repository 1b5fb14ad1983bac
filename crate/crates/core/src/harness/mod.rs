//! Command-line orchestration: preprocess → balance → train → evaluate → report.

pub mod archive;
pub mod commands;
pub mod config;
pub mod lock;
pub mod manifest;

pub use commands::{
    cmd_balance, cmd_evaluate, cmd_preprocess, cmd_report, cmd_train, Averaging, Run,
};
pub use config::{ArchKind, ExperimentConfig, Overrides, StageSeeds};
