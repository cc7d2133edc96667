//! File formats, datasets, the external-model adapter host, scorecard
//! rendering and the `xaieval` command line, on top of `xaieval-core`.

pub mod adapter;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod formats;
pub mod records;
pub mod render;

pub use error::{Error, Result};
pub use xaieval_core;
