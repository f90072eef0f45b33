//! Pipeline driver behind the `windstate` command: config parsing and
//! validation, stage orchestration with a content-addressed cache, and the
//! run manifest.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{parse_config, validate_config, validate_config_with, Overrides, PipelineConfig};
pub use error::CliError;
pub use pipeline::{run_pipeline, Command, Manifest, RunOutcome};
