//! Filesystem side of `nextpoint-core`: scene files, datasets, checkpoints,
//! run logs, reports and the `nextpoint` command-line driver.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod executor;
pub mod logging;
pub mod report;
pub mod scene_file;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use executor::RayonExecutor;
