//! Batch front end: config parsing, pipeline dispatch and output files.

// `!(x > 0.0)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod run;

pub use config::{parse_config, read_config, Format, LoadedConfig, ScenarioConfig};
pub use error::{CliError, ErrorKind};
pub use run::{run, Command, Overrides};
