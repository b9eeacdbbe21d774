//! Storage, configuration and the `nodulesynth` command line on top of
//! `nodulesynth-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod logs;

pub use error::{ConfigError, Error, Result};
