use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Failure classes a model provider can report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderErrorKind {
    /// The provider does not implement the requested operation.
    Capability,
    /// The request parameters were rejected.
    InvalidParams,
    /// The provider failed while serving a supported request.
    Fault,
    /// No reply arrived in time.
    Timeout,
    /// The reply violated framing or id matching.
    Protocol,
}

impl fmt::Display for ProviderErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProviderErrorKind::Capability => "capability",
            ProviderErrorKind::InvalidParams => "invalid params",
            ProviderErrorKind::Fault => "adapter fault",
            ProviderErrorKind::Timeout => "timeout",
            ProviderErrorKind::Protocol => "protocol",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} error: {message}{}", channel.map(|c| alloc::format!(" (channel {c})")).unwrap_or_default())]
pub struct ProviderError {
    pub kind: ProviderErrorKind,
    pub message: String,
    /// Set when the failure happened while rescoring an ablated channel.
    pub channel: Option<usize>,
}

impl ProviderError {
    pub fn new(kind: ProviderErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            channel: None,
        }
    }

    pub fn capability(message: impl Into<String>) -> Self {
        Self::new(ProviderErrorKind::Capability, message)
    }

    pub fn with_channel(mut self, channel: usize) -> Self {
        self.channel = Some(channel);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(String),
    #[error("roi {box_height}x{box_width} does not fit a {height}x{width} map")]
    InvalidRoiSize {
        box_height: usize,
        box_width: usize,
        height: usize,
        width: usize,
    },
    #[error("quantile {0} outside (0, 1)")]
    InvalidQuantile(f64),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("input {height}x{width} smaller than required {required}x{required}")]
    InputTooSmall {
        height: usize,
        width: usize,
        required: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("channel {channel} out of range for {channels} channels")]
    BadChannel { channel: usize, channels: usize },
    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),
    #[error("runs from several methods cannot share one scorecard")]
    MixedRuns,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("undefined: {0}")]
    Undefined(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
