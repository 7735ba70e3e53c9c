//! File formats, configuration and the training and evaluation drivers.

pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod error;
pub mod harness;
pub mod report;
pub mod tensorfile;

pub use error::{Error, Result};
