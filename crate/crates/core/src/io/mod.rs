//! Persistence and configuration: QFLD field files, diagnostics tables,
//! run configs and manifests.

pub mod config;
pub mod csv;
pub mod field;
pub mod manifest;

pub use config::{load_config, load_config_for, load_config_with, parse_config, parse_config_for, Mode, ProblemSpec, RunConfig};
pub use csv::{emit_diagnostics, trajectory_csv};
pub use field::{load_field, save_field};
