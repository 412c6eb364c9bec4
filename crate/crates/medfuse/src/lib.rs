//! File formats, configuration and the command line for `medfuse-core`.
//!
//! - [`mmeb`]: MMEB1 embedding datasets
//! - [`mmwt`]: MMWT1 checkpoints
//! - [`config`]: `key = value` run configuration
//! - [`report`]: JSON-lines reports
//! - [`cli`]: the `medfuse` verbs

pub mod cli;
pub mod config;
pub mod error;
pub mod mmeb;
pub mod mmwt;
pub mod report;

pub use error::{ConfigError, Error, FormatError, Result};
