//! The two-part scorecard: descriptive information about a method plus the
//! quantitative criterion tables of its runs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cam::CamMethod;
use crate::error::{Error, Result};
use crate::eval::RunResult;
use crate::metrics::Criterion;

pub const SCHEMA: &str = "xaieval/1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overview {
    pub name: String,
    pub abbreviation: String,
    pub description: String,
    /// E.g. "local, post-hoc".
    #[serde(rename = "type")]
    pub method_type: String,
    pub citation: String,
    pub software: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextOfUse {
    pub audience: String,
    pub task: String,
    pub model: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptiveSection {
    pub overview: Overview,
    pub context_of_use: ContextOfUse,
    pub limitations_and_recommendations: Vec<String>,
    pub validation_setting: String,
    /// Manually entered summary of user studies; usefulness is not computed.
    pub usefulness_notes: Option<String>,
}

impl DescriptiveSection {
    /// A starting description for the built-in methods on the reference
    /// detector.
    pub fn for_method(method: CamMethod) -> Self {
        let (name, abbreviation, description, citation) = match method {
            CamMethod::Eigen => (
                "Eigen class activation mapping",
                "Eigen CAM",
                "Projects the feature maps of one layer onto their first principal component.",
                "Muhammad and Yeasin, Eigen-CAM: Class Activation Map using Principal Components, IJCNN 2020",
            ),
            CamMethod::Ablation => (
                "Ablation class activation mapping",
                "Ablation CAM",
                "Weights each feature map by the relative score drop when that map is zeroed.",
                "Desai and Ramaswamy, Ablation-CAM: Visual Explanations for Deep Convolutional Network via Gradient-free Localization, WACV 2020",
            ),
            CamMethod::Whitebox => (
                "White-box attribution",
                "White box",
                "The rectified decision map of a transparent linear detector.",
                "",
            ),
        };
        Self {
            overview: Overview {
                name: name.into(),
                abbreviation: abbreviation.into(),
                description: description.into(),
                method_type: "local, post-hoc".into(),
                citation: citation.into(),
                software: String::from(concat!("xaieval ", env!("CARGO_PKG_VERSION"))),
            },
            context_of_use: ContextOfUse {
                audience: "developers and reviewers of imaging detection models".into(),
                task: "lesion detection on synthetic mammography-like phantoms".into(),
                model: "transparent matched-filter reference detector".into(),
            },
            limitations_and_recommendations: vec![
                "Results on synthetic phantoms do not transfer to clinical images without revalidation.".into(),
                "Gate thresholds are configurable and carry no clinical meaning by themselves.".into(),
            ],
            validation_setting: "Seeded desk-scale phantom dataset; see provenance for seeds and configuration.".into(),
            usefulness_notes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.overview.name.trim().is_empty() {
            return Err(Error::Schema("overview.name must not be empty".into()));
        }
        if self.context_of_use.task.trim().is_empty() {
            return Err(Error::Schema("context_of_use.task must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionTable {
    pub criterion: Criterion,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub artifact_version: String,
    pub model_id: String,
    pub master_seed: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    /// Configuration echo, one entry per configuration section.
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub schema: String,
    pub method: Option<CamMethod>,
    pub descriptive: DescriptiveSection,
    /// One table per criterion, in evaluation order.
    pub quantitative: Vec<CriterionTable>,
    pub provenance: Provenance,
    /// Some criterion has no runs, or a run did not complete.
    pub incomplete: bool,
}

/// Assembles a scorecard. Runs must all belong to one method; they are
/// grouped per criterion in evaluation order, keeping their relative order
/// within a criterion.
pub fn build_scorecard(
    desc: DescriptiveSection,
    runs: Vec<RunResult>,
    mut provenance: Provenance,
) -> Result<Scorecard> {
    desc.validate()?;
    let method = runs.first().map(|r| r.method);
    if runs.iter().any(|r| Some(r.method) != method) {
        return Err(Error::MixedRuns);
    }
    if provenance.artifact_version.is_empty() {
        provenance.artifact_version = String::from(env!("CARGO_PKG_VERSION"));
    }
    if provenance.model_id.is_empty() {
        if let Some(r) = runs.first() {
            provenance.model_id = r.model_id.clone();
        }
    }
    let mut incomplete = runs.iter().any(|r| r.status != crate::eval::RunStatus::Complete);
    let mut quantitative = Vec::new();
    for c in Criterion::ORDER {
        let group: Vec<RunResult> = runs.iter().filter(|r| r.criterion == c).cloned().collect();
        incomplete |= group.is_empty();
        quantitative.push(CriterionTable {
            criterion: c,
            runs: group,
        });
    }
    Ok(Scorecard {
        schema: SCHEMA.into(),
        method,
        descriptive: desc,
        quantitative,
        provenance,
        incomplete,
    })
}
