//! Dataset directories: `manifest.json` plus per-case image and truth files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xaieval_core::phantom::{self, Case, PhantomConfig};
use xaieval_core::seed;

use crate::error::{Error, Result};
use crate::formats;

pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA: &str = "xaieval-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// Raw little-endian float32 with a JSON sidecar (lossless).
    #[default]
    F32,
    /// 16-bit binary PGM (quantized to 1/65535).
    Pgm,
}

/// How a phantom dataset was generated; regenerating from it is
/// bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub master_seed: u64,
    pub n_cases: usize,
    pub lesion_fraction: f64,
    /// `seed` is the generation substream of `master_seed`.
    pub phantom: PhantomConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub index: usize,
    pub has_lesion: bool,
    pub image: String,
    #[serde(default)]
    pub truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    /// Absent for datasets that were not generated by `gen`.
    #[serde(default)]
    pub generator: Option<Generator>,
    pub cases: Vec<CaseEntry>,
}

/// Generates the phantom dataset of `master_seed`.
pub fn generate(
    mut cfg: PhantomConfig,
    n_cases: usize,
    lesion_fraction: f64,
    master_seed: u64,
) -> Result<(Generator, Vec<Case>)> {
    cfg.seed = seed::substream(master_seed, seed::GENERATION);
    let cases = phantom::generate_dataset(&cfg, n_cases, lesion_fraction)?;
    let generator = Generator {
        master_seed,
        n_cases,
        lesion_fraction,
        phantom: cfg,
    };
    Ok((generator, cases))
}

pub fn write(dir: &Path, generator: Option<Generator>, cases: &[Case], format: ImageFormat) -> Result<()> {
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        let image = match format {
            ImageFormat::F32 => format!("images/{}.f32", case.id),
            ImageFormat::Pgm => format!("images/{}.pgm", case.id),
        };
        match format {
            ImageFormat::F32 => formats::write_image_f32(&dir.join(&image), &case.image)?,
            ImageFormat::Pgm => formats::write_pgm(&dir.join(&image), &case.image)?,
        }
        let truth = match &case.truth {
            Some(t) => {
                formats::write_truth(&dir.join("truth"), &case.id, t)?;
                Some(format!("truth/{}.json", case.id))
            }
            None => None,
        };
        entries.push(CaseEntry {
            id: case.id.clone(),
            index: case.index,
            has_lesion: case.has_lesion,
            image,
            truth,
        });
    }
    let manifest = Manifest {
        schema: SCHEMA.into(),
        generator,
        cases: entries,
    };
    formats::write_json(&dir.join(MANIFEST), &manifest)
}

/// A loaded dataset. `phantom` is set when the cases carry generator
/// provenance, which dose re-noising needs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn has_phantom_provenance(&self) -> bool {
        self.manifest.generator.is_some()
    }
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = formats::read_json(&path)?;
    if manifest.schema != SCHEMA {
        return Err(Error::format(
            &path,
            format!("unsupported schema {:?}", manifest.schema),
        ));
    }
    if manifest.cases.is_empty() {
        return Err(Error::format(&path, "dataset has no cases"));
    }
    let provenance = manifest
        .generator
        .as_ref()
        .map(|g| g.phantom.clone())
        .unwrap_or_default();
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for e in &manifest.cases {
        let image = formats::read_image(&dir.join(&e.image))?;
        if let Some(first) = cases.first().map(|c: &Case| c.image.dims()) {
            if image.dims() != first {
                return Err(Error::format(dir.join(&e.image), "all images must share one geometry"));
            }
        }
        let truth = match &e.truth {
            Some(t) => Some(formats::read_truth(&dir.join(t), image.width(), image.height())?),
            None => None,
        };
        if truth.is_some() != e.has_lesion {
            return Err(Error::format(
                &path,
                format!("{}: truth must be present iff has_lesion", e.id),
            ));
        }
        cases.push(Case {
            id: e.id.clone(),
            index: e.index,
            image,
            has_lesion: e.has_lesion,
            truth,
            provenance: provenance.clone(),
        });
    }
    Ok(Dataset { manifest, cases })
}
