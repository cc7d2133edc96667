use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{accuracy_pair, defined, finish, Evaluation, Harness, Recorder, RunHeader};
use crate::cam::{self, CamMethod};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::grid::{binarize_top_quantile, extract_peak_roi, Heatmap, Mask, Roi};
use crate::metrics::{iou_box, iou_mask, spearman, Criterion, Metric, MetricRecord};
use crate::phantom::Case;

/// Variant of the direct (lesion annotation) tier.
pub const DIRECT: &str = "direct";
/// Variant of the contextual (lesion box plus annulus) tier.
pub const CONTEXT: &str = "context";

fn score_tier(
    rec: &mut Recorder<'_>,
    variant: &str,
    h: &Heatmap,
    region: &Roi,
    mask: &Mask,
    soft: &Heatmap,
    q: f64,
) -> Result<()> {
    let roi = extract_peak_roi(h, region.height(), region.width())?;
    rec.value(variant, Metric::IouBox, iou_box(&roi, region));
    rec.value(variant, Metric::IouMask, iou_mask(&binarize_top_quantile(h, q)?, mask)?);
    rec.push(variant, Metric::Spearman, defined(spearman(h, soft))?);
    Ok(())
}

fn case_records<E: Executor>(harness: &Harness<'_, E>, case: &Case, method: CamMethod) -> Result<Vec<MetricRecord>> {
    let truth = case.truth.as_ref().expect("only lesion cases are scored");
    let q = harness.metric.binarize_quantile;
    let mut session = harness.provider.session()?;
    let h = cam::explain(session.as_mut(), method, &case.image)?;
    let mut rec = Recorder::new(case, method, Criterion::Plausibility);
    score_tier(&mut rec, DIRECT, &h, &truth.bbox, &truth.lesion_mask(), &truth.mask, q)?;
    let pred = session.predict(&case.image)?;
    let (acc, loc) = accuracy_pair(&pred, true, Some(truth), case.image.dims(), |p| p);
    rec.value(DIRECT, Metric::Accuracy, acc);
    rec.value(DIRECT, Metric::AccuracyLoc, loc);
    if let (Some(region), Some(soft)) = (truth.context_region(), truth.context_soft_mask()) {
        let bounds = region.bounding_box().unwrap_or(truth.bbox);
        score_tier(&mut rec, CONTEXT, &h, &bounds, &region, &soft, q)?;
    }
    Ok(rec.records)
}

/// Agreement between explanations and the lesion ground truth, at the
/// direct tier and, where a context annulus exists, the contextual tier.
pub fn run_plausibility<E: Executor>(
    harness: &Harness<'_, E>,
    cases: &[Case],
    method: CamMethod,
) -> Result<Evaluation> {
    harness.metric.validate()?;
    let lesions: Vec<&Case> = cases.iter().filter(|c| c.truth.is_some()).collect();
    if lesions.is_empty() {
        return Err(Error::EmptyEvaluation(
            "plausibility needs lesion cases with ground truth".into(),
        ));
    }
    let per_case = harness.exec.map(&lesions, |case| case_records(harness, case, method));
    let mut params = BTreeMap::new();
    params.insert(
        "binarize_quantile".to_string(),
        harness.metric.binarize_quantile.to_string(),
    );
    params.insert("cases".to_string(), lesions.len().to_string());
    finish(
        harness.provider,
        RunHeader {
            protocol: "plausibility",
            criterion: Criterion::Plausibility,
            method,
            seeds: BTreeMap::new(),
            params,
        },
        per_case,
        |_| None,
    )
}
