//! Library surface of the experiment harness so integration tests can drive
//! subcommands without spawning the binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_calibrate, cmd_compare, cmd_export_curves, cmd_run, cmd_schedule, cmd_sweep,
    curve_mean_percentile, fora_consistency_note, fora_eligible_fraction, ScheduleSource,
};
pub use config::{DiffusionConfig, ExperimentConfig, Overrides};
pub use error::CliError;
