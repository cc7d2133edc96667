//! Run configuration files.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use xaieval_core::cam::CamMethod;
use xaieval_core::eval::{GateConfig, PipelineConfig};
use xaieval_core::grid::MetricParams;
use xaieval_core::provider::{Provider, RefProvider};

use crate::adapter::{AdapterProvider, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};
use crate::formats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    #[default]
    BuiltinRefmodel,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    /// Shell command starting the adapter (external providers only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Per-request reply deadline.
    pub timeout_ms: u64,
}

impl Default for ProviderSpec {
    fn default() -> Self {
        Self {
            kind: ProviderKind::default(),
            command: None,
            timeout_ms: DEFAULT_TIMEOUT.as_millis() as u64,
        }
    }
}

impl ProviderSpec {
    pub fn external(command: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::External,
            command: Some(command.into()),
            ..Self::default()
        }
    }

    pub fn connect(&self) -> Result<Box<dyn Provider>> {
        match self.kind {
            ProviderKind::BuiltinRefmodel => Ok(Box::new(RefProvider::default())),
            ProviderKind::External => {
                let command = self
                    .command
                    .as_deref()
                    .ok_or_else(|| Error::Usage("an external provider needs `command`".into()))?;
                let timeout = Duration::from_millis(self.timeout_ms.max(1));
                Ok(Box::new(AdapterProvider::connect(command, timeout)?))
            }
        }
    }
}

fn default_methods() -> Vec<CamMethod> {
    vec![CamMethod::Eigen, CamMethod::Ablation]
}

/// Everything a run depends on. Echoed into `run.json`; the output
/// directory and the worker count are left out so that echoes of the same
/// run compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<CamMethod>,
    #[serde(default)]
    pub provider: ProviderSpec,
    /// Every protocol seed is a substream of this.
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Absent in a file means ungated.
    #[serde(default)]
    pub gates: Option<GateConfig>,
    #[serde(default)]
    pub metric: MetricParams,
}

impl Default for RunConfig {
    /// Used when no file is given: both CAM methods on the reference
    /// detector under the shipped gates.
    fn default() -> Self {
        Self {
            dataset: None,
            methods: default_methods(),
            provider: ProviderSpec::default(),
            master_seed: 0,
            pipeline: PipelineConfig::default(),
            gates: Some(GateConfig::shipped()),
            metric: MetricParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        formats::read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Usage("no methods selected".into()));
        }
        self.metric.validate()?;
        if let Some(g) = &self.gates {
            g.validate()?;
        }
        for spec in &self.pipeline.perturbations {
            spec.validate()?;
        }
        Ok(())
    }

    /// Pipeline settings with every seed derived from the master seed.
    pub fn seeded_pipeline(&self) -> PipelineConfig {
        self.pipeline.clone().seeded(self.master_seed)
    }
}
