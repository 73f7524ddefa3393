//! File formats, the on-disk dataset layout, threaded training and the
//! `rspu` command line on top of `rspu-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod history;
pub mod parallel;
pub mod ppm;

pub use error::{CliError, CliResult};
