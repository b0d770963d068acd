//! Command-line pipeline: simulate → classify → tomography → report.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod svg;

pub use config::{Overrides, PipelineConfig, ReferenceSource};
pub use error::{CliError, Result};
