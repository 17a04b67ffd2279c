//! Experiment plumbing: configuration, dataset generation, checkpoints and
//! the commands behind the `bicap` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;

pub use checkpoint::Checkpoint;
pub use commands::{cmd_evaluate, cmd_generate, cmd_report, cmd_train, cmd_transform};
pub use config::{ablation_ladder, RunConfig};
