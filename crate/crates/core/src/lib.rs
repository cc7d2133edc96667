//! Numerics and protocols for evaluating saliency-map explanations of a
//! detector on synthetic lesion phantoms.
//!
//! Everything here is allocation-only and deterministic given a seed. File
//! formats, the external adapter host and the command-line tool live in the
//! companion `xaieval` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod cam;
pub mod error;
pub mod eval;
pub mod exec;
pub mod filter;
pub mod grid;
pub mod metrics;
pub mod perturb;
pub mod phantom;
pub mod provider;
pub mod refmodel;
pub mod scorecard;
pub mod seed;

pub use error::{Error, ProviderError, ProviderErrorKind, Result};
