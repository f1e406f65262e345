//! Command-line side of sida: checkpoints, file formats, configuration, the
//! two-worker serving pipeline, reports and the benchmark grid.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod overhead;
pub mod pipeline;
pub mod report;
pub mod workflow;

pub use error::{Error, Result};
