//! File formats, experiment runners and command implementations for the
//! residual objectness detector in `resobj-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod report;

pub use error::{Error, Result};
