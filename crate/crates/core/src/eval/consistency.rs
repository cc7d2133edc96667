use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{accuracy_pair, finish, list, Evaluation, Harness, Recorder, RunHeader};
use crate::cam::{self, CamMethod};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::grid::{binarize_top_quantile, Heatmap, Image};
use crate::metrics::{iou_mask, mse, ssim, Criterion, Metric, MetricRecord};
use crate::perturb::{self, DoseSource, PerturbationKind, PerturbationSpec};
use crate::phantom::Case;
use crate::provider::Model;
use crate::seed;

/// How dose levels are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoseMode {
    /// Re-noise each case's noiseless composite (phantom datasets).
    #[default]
    Phantom,
    /// Add noise on top of the stored image; dose factors must be <= 1.
    Additive,
}

fn perturbed(case: &Case, spec: &PerturbationSpec, level: f64, mode: DoseMode) -> Result<Image> {
    match spec.kind {
        PerturbationKind::Dose => {
            let source = match mode {
                DoseMode::Phantom => DoseSource::Phantom {
                    cfg: &case.provenance,
                    index: case.index,
                    has_lesion: case.has_lesion,
                },
                DoseMode::Additive => DoseSource::Additive {
                    seed: seed::mix(spec.seed, case.index as u64),
                },
            };
            Ok(perturb::apply_dose(&case.image, level, source)?.0)
        }
        PerturbationKind::Rotation => perturb::rotate(&case.image, level),
        PerturbationKind::Shift => perturb::shift(&case.image, level as i64, level as i64),
    }
}

fn back_to_original(h: &Heatmap, spec: &PerturbationSpec, level: f64) -> Result<Heatmap> {
    match spec.kind {
        PerturbationKind::Dose => Ok(h.clone()),
        PerturbationKind::Rotation => perturb::reregister_heatmap(h, level),
        PerturbationKind::Shift => perturb::unshift_heatmap(h, level as i64, level as i64),
    }
}

fn case_records<E: Executor>(
    harness: &Harness<'_, E>,
    case: &Case,
    method: CamMethod,
    spec: &PerturbationSpec,
    mode: DoseMode,
) -> Result<Vec<MetricRecord>> {
    let q = harness.metric.binarize_quantile;
    let mut session = harness.provider.session()?;
    let model: &mut dyn Model = session.as_mut();
    let original = cam::explain(model, method, &case.image)?;
    let original_mask = binarize_top_quantile(&original, q)?;
    let mut rec = Recorder::new(case, method, Criterion::Consistency);
    for &level in &spec.levels {
        let variant = spec.variant(level);
        let img = perturbed(case, spec, level, mode)?;
        let h = back_to_original(&cam::explain(model, method, &img)?, spec, level)?;
        rec.value(&variant, Metric::Ssim, ssim(&original, &h, &harness.metric)?);
        rec.value(&variant, Metric::Mse, mse(&original, &h)?);
        rec.value(
            &variant,
            Metric::IouMask,
            iou_mask(&original_mask, &binarize_top_quantile(&h, q)?)?,
        );
        let pred = model.predict(&img)?;
        let dims = img.dims();
        let (acc, loc) = accuracy_pair(&pred, case.has_lesion, case.truth.as_ref(), dims, |p| {
            perturb::map_point_back(spec.kind, level, p, dims)
        });
        rec.value(&variant, Metric::Accuracy, acc);
        rec.value(&variant, Metric::AccuracyLoc, loc);
    }
    Ok(rec.records)
}

/// Explanation stability along one perturbation axis. Each perturbed
/// heatmap is brought back to the original frame before comparison.
pub fn run_consistency<E: Executor>(
    harness: &Harness<'_, E>,
    cases: &[Case],
    method: CamMethod,
    spec: &PerturbationSpec,
    mode: DoseMode,
) -> Result<Evaluation> {
    let first = cases
        .first()
        .ok_or_else(|| Error::EmptyEvaluation("consistency needs at least one case".into()))?;
    spec.validate_for(first.image.height(), first.image.width())?;
    harness.metric.validate()?;
    if spec.kind == PerturbationKind::Dose && mode == DoseMode::Additive && spec.levels.iter().any(|&l| l > 1.0) {
        return Err(Error::Config("additive dose mode cannot raise the dose".into()));
    }
    let per_case = harness
        .exec
        .map(cases, |case| case_records(harness, case, method, spec, mode));
    let mut seeds = BTreeMap::new();
    seeds.insert(seed::PERTURBATION.to_string(), spec.seed);
    let mut params = BTreeMap::new();
    params.insert("kind".to_string(), spec.kind.name().to_string());
    params.insert("levels".to_string(), list(&spec.levels));
    params.insert(
        "binarize_quantile".to_string(),
        harness.metric.binarize_quantile.to_string(),
    );
    if spec.kind == PerturbationKind::Dose {
        let source: String = match mode {
            DoseMode::Phantom => "phantom".into(),
            DoseMode::Additive => "additive".into(),
        };
        params.insert("dose_source".to_string(), source);
    }
    let protocol = alloc::format!("consistency/{}", spec.kind.name());
    finish(
        harness.provider,
        RunHeader {
            protocol: &protocol,
            criterion: Criterion::Consistency,
            method,
            seeds,
            params,
        },
        per_case,
        |_| None,
    )
}
