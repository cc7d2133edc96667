//! The model abstraction the evaluation protocols run against.
//!
//! A [`Provider`] hands out [`Model`] sessions. A session is used by one case
//! at a time and may hold state (a randomized head, a feature cache, an
//! exclusive adapter connection); the protocols never share a session
//! between threads.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ProviderError, ProviderErrorKind};
use crate::grid::{Heatmap, Image};
use crate::refmodel::{self, FeatureStack, Prediction, RandomizationMode, RefModel};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Predict,
    Features,
    Ablate,
    Randomize,
    Attribution,
}

impl Capability {
    pub fn name(&self) -> &'static str {
        match self {
            Capability::Predict => "predict",
            Capability::Features => "features",
            Capability::Ablate => "ablate",
            Capability::Randomize => "randomize",
            Capability::Attribution => "attribution",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub protocol: u32,
    pub supports: Vec<Capability>,
}

impl Capabilities {
    pub fn has(&self, c: Capability) -> bool {
        self.supports.contains(&c)
    }

    pub fn require(&self, c: Capability) -> Result<(), ProviderError> {
        if self.has(c) {
            Ok(())
        } else {
            Err(ProviderError::capability(format!(
                "provider does not support `{}`",
                c.name()
            )))
        }
    }
}

/// Parameters of a weight randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Randomization {
    pub mode: RandomizationMode,
    pub sigma: f64,
    pub seed: u64,
}

/// One exclusive session with a model.
pub trait Model {
    fn predict(&mut self, img: &Image) -> Result<Prediction, ProviderError>;

    fn features(&mut self, img: &Image) -> Result<FeatureStack, ProviderError>;

    /// Prediction with feature channel `channel` zeroed.
    fn ablate(&mut self, img: &Image, channel: usize) -> Result<Prediction, ProviderError>;

    /// Applies a weight randomization, or restores the original weights
    /// when `None`.
    fn randomize(&mut self, r: Option<&Randomization>) -> Result<(), ProviderError> {
        match r {
            None => Ok(()),
            Some(_) => Err(ProviderError::capability("randomize")),
        }
    }

    /// The model's own attribution map (a white-box oracle).
    fn attribution(&mut self, _img: &Image) -> Result<Heatmap, ProviderError> {
        Err(ProviderError::capability("attribution"))
    }
}

/// Source of model sessions, shared by all evaluation workers.
pub trait Provider: Sync {
    fn capabilities(&self) -> Capabilities;

    /// Identifier recorded in every run result.
    fn model_id(&self) -> String;

    /// Score at zero evidence; deletion metrics are measured relative to it.
    fn null_score(&self) -> f64 {
        0.0
    }

    fn session(&self) -> Result<Box<dyn Model + '_>, ProviderError>;
}

/// The built-in reference detector as a provider.
#[derive(Debug, Clone, Default)]
pub struct RefProvider {
    model: RefModel,
}

impl RefProvider {
    pub fn new(model: RefModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &RefModel {
        &self.model
    }
}

impl Provider for RefProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            protocol: PROTOCOL_VERSION,
            supports: alloc::vec![
                Capability::Predict,
                Capability::Features,
                Capability::Ablate,
                Capability::Randomize,
                Capability::Attribution,
            ],
        }
    }

    fn model_id(&self) -> String {
        format!("refmodel/{}", self.model.bank.id())
    }

    fn null_score(&self) -> f64 {
        self.model.head.bias
    }

    fn session(&self) -> Result<Box<dyn Model + '_>, ProviderError> {
        Ok(Box::new(RefSession::new(&self.model)))
    }
}

fn fault(e: crate::Error) -> ProviderError {
    match e {
        crate::Error::BadChannel { channel, .. } => {
            ProviderError::new(ProviderErrorKind::InvalidParams, format!("{e}")).with_channel(channel)
        }
        crate::Error::InputTooSmall { .. } | crate::Error::InvalidImage(_) => {
            ProviderError::new(ProviderErrorKind::InvalidParams, format!("{e}"))
        }
        _ => ProviderError::new(ProviderErrorKind::Fault, format!("{e}")),
    }
}

/// Session over a [`RefModel`]. Features of the most recent image are
/// cached, so rescoring the same image (ablation, head-only randomization)
/// skips the convolutions.
pub struct RefSession<'a> {
    base: &'a RefModel,
    randomized: Option<RefModel>,
    cache: Option<(Image, FeatureStack)>,
}

impl<'a> RefSession<'a> {
    pub fn new(base: &'a RefModel) -> Self {
        Self {
            base,
            randomized: None,
            cache: None,
        }
    }

    fn active(&self) -> &RefModel {
        self.randomized.as_ref().unwrap_or(self.base)
    }

    fn stack(&mut self, img: &Image) -> Result<&FeatureStack, ProviderError> {
        let hit = matches!(&self.cache, Some((cached, _)) if cached == img);
        if !hit {
            let stack = self.active().features(img).map_err(fault)?;
            self.cache = Some((img.clone(), stack));
        }
        Ok(&self.cache.as_ref().expect("cache filled above").1)
    }
}

impl Model for RefSession<'_> {
    fn predict(&mut self, img: &Image) -> Result<Prediction, ProviderError> {
        self.stack(img)?;
        let m = self.active();
        let stack = &self.cache.as_ref().expect("cache filled above").1;
        refmodel::predict_stack(stack, &m.head, m.box_radius).map_err(fault)
    }

    fn features(&mut self, img: &Image) -> Result<FeatureStack, ProviderError> {
        self.stack(img).cloned()
    }

    fn ablate(&mut self, img: &Image, channel: usize) -> Result<Prediction, ProviderError> {
        let ablated = refmodel::ablate_channel(self.stack(img)?, channel).map_err(fault)?;
        let m = self.active();
        refmodel::predict_stack(&ablated, &m.head, m.box_radius).map_err(fault)
    }

    fn randomize(&mut self, r: Option<&Randomization>) -> Result<(), ProviderError> {
        let features_change = |r: Option<&Randomization>| r.is_some_and(|r| !r.mode.head_only());
        let invalidate = features_change(r) || self.randomized.as_ref().is_some_and(|m| m.bank != self.base.bank);
        self.randomized = match r {
            None => None,
            Some(r) => {
                let (head, bank) =
                    refmodel::randomize_weights(&self.base.bank, &self.base.head, r.mode, r.sigma, r.seed)
                        .map_err(|e| ProviderError::new(ProviderErrorKind::InvalidParams, format!("{e}")))?;
                Some(RefModel {
                    bank,
                    head,
                    box_radius: self.base.box_radius,
                })
            }
        };
        if invalidate {
            self.cache = None;
        }
        Ok(())
    }

    fn attribution(&mut self, img: &Image) -> Result<Heatmap, ProviderError> {
        self.stack(img)?;
        let m = self.active();
        let stack = &self.cache.as_ref().expect("cache filled above").1;
        refmodel::whitebox_attribution(stack, &m.head).map_err(fault)
    }
}
