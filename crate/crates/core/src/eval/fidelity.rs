use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bool_value, defined, finish, list, mean_of, Evaluation, Harness, Recorder, RunHeader};
use crate::cam::{self, CamMethod};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::filter;
use crate::grid::{binarize_top_quantile, extract_peak_roi, Heatmap, Image, Roi};
use crate::metrics::{iou_mask, mse, spearman, ssim, Criterion, Metric, MetricRecord};
use crate::phantom::{Case, BASELINE};
use crate::provider::{Capability, Model, Randomization};
use crate::refmodel::RandomizationMode;
use crate::seed;

/// Variant carrying accuracy of the unrandomized model.
pub const NO_RANDOMIZATION: &str = "none";
pub const PEAK_ROI: &str = "peak-roi";
pub const RANDOM_ROI: &str = "random-roi";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationOptions {
    pub modes: Vec<RandomizationMode>,
    pub sigma: f64,
    /// One randomization per seed per mode.
    pub seeds: Vec<u64>,
}

impl Default for RandomizationOptions {
    fn default() -> Self {
        Self {
            modes: vec![RandomizationMode::HeadReinit],
            sigma: 1.0,
            seeds: vec![0],
        }
    }
}

impl RandomizationOptions {
    /// `count` seeds derived from `base`.
    pub fn derive_seeds(base: u64, count: usize) -> Vec<u64> {
        (0..count as u64).map(|i| seed::mix(base, i)).collect()
    }
}

/// What replaces deleted pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FillMode {
    /// A Gaussian-blurred copy of the input: removes local structure while
    /// keeping the surrounding intensity level.
    Blurred {
        sigma: f64,
    },
    Constant {
        value: f64,
    },
}

impl Default for FillMode {
    fn default() -> Self {
        FillMode::Blurred { sigma: 8.0 }
    }
}

impl FillMode {
    pub fn baseline() -> Self {
        FillMode::Constant { value: BASELINE }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FillMode::Blurred { sigma } if sigma.is_finite() && sigma > 0.0 => Ok(()),
            FillMode::Constant { value } if value.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid fill {other:?}"))),
        }
    }

    /// Full-size replacement image.
    fn source(&self, img: &Image) -> Vec<f32> {
        match *self {
            FillMode::Blurred { sigma } => {
                let src: Vec<f64> = img.pixels().iter().map(|&v| f64::from(v)).collect();
                filter::gaussian_blur(&src, img.width(), img.height(), sigma)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect()
            }
            FillMode::Constant { value } => vec![value as f32; img.pixels().len()],
        }
    }

    fn describe(&self) -> String {
        match self {
            FillMode::Blurred { sigma } => format!("blurred(sigma={sigma})"),
            FillMode::Constant { value } => format!("constant({value})"),
        }
    }
}

fn paste(pixels: &mut [f32], fill: &[f32], width: usize, roi: &Roi) {
    for r in roi.row0..roi.row1 {
        pixels[r * width + roi.col0..r * width + roi.col1]
            .copy_from_slice(&fill[r * width + roi.col0..r * width + roi.col1]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeletionOptions {
    /// Side of the deleted square.
    pub roi_size: usize,
    pub fill: FillMode,
    /// Skip cases without a lesion (no evidence to delete).
    pub lesion_only: bool,
    /// Seed for random control placements.
    pub seed: u64,
}

impl Default for DeletionOptions {
    fn default() -> Self {
        Self {
            roi_size: 11,
            fill: FillMode::default(),
            lesion_only: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeletionOrder {
    Importance,
    Reverse,
    Random,
}

impl DeletionOrder {
    pub const ALL: [DeletionOrder; 3] = [DeletionOrder::Importance, DeletionOrder::Reverse, DeletionOrder::Random];

    pub fn name(&self) -> &'static str {
        match self {
            DeletionOrder::Importance => "importance",
            DeletionOrder::Reverse => "reverse",
            DeletionOrder::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncrementalOptions {
    pub patch: usize,
    pub steps: usize,
    pub orders: Vec<DeletionOrder>,
    /// Random orders drawn per case.
    pub random_orders: usize,
    pub fill: FillMode,
    pub lesion_only: bool,
    pub seed: u64,
    /// Emit one `score_ratio` record per step.
    pub curves: bool,
}

impl Default for IncrementalOptions {
    fn default() -> Self {
        Self {
            patch: 8,
            steps: 32,
            orders: DeletionOrder::ALL.to_vec(),
            random_orders: 5,
            fill: FillMode::default(),
            lesion_only: true,
            seed: 0,
            curves: true,
        }
    }
}

fn selected(cases: &[Case], lesion_only: bool) -> Result<Vec<&Case>> {
    let out: Vec<&Case> = cases.iter().filter(|c| !lesion_only || c.has_lesion).collect();
    if out.is_empty() {
        return Err(Error::EmptyEvaluation("no cases to delete evidence from".into()));
    }
    Ok(out)
}

/// Score change relative to the score above the null level.
fn drop_fraction(before: f64, after: f64, null: f64) -> f64 {
    (before - after) / libm::fabs(before - null).max(cam::ABLATION_EPSILON)
}

// ---------------------------------------------------------------------------
// Model parameter randomization

fn randomization_case<E: Executor>(
    harness: &Harness<'_, E>,
    case: &Case,
    method: CamMethod,
    opts: &RandomizationOptions,
) -> Result<Vec<MetricRecord>> {
    let q = harness.metric.binarize_quantile;
    let mut session = harness.provider.session()?;
    let model: &mut dyn Model = session.as_mut();
    let before = cam::explain(model, method, &case.image)?;
    let before_mask = binarize_top_quantile(&before, q)?;
    let mut rec = Recorder::new(case, method, Criterion::Fidelity);
    let pred = model.predict(&case.image)?;
    rec.value(
        NO_RANDOMIZATION,
        Metric::Accuracy,
        bool_value(pred.present == case.has_lesion),
    );
    for mode in &opts.modes {
        for &s in &opts.seeds {
            let r = Randomization {
                mode: *mode,
                sigma: opts.sigma,
                seed: s,
            };
            model.randomize(Some(&r))?;
            let outcome = (|| -> Result<(Heatmap, bool)> {
                let h = cam::explain(model, method, &case.image)?;
                Ok((h, model.predict(&case.image)?.present))
            })();
            model.randomize(None)?;
            let (after, present) = outcome?;
            let v = mode.name();
            rec.value(v, Metric::Ssim, ssim(&before, &after, &harness.metric)?);
            rec.value(v, Metric::Mse, mse(&before, &after)?);
            rec.value(
                v,
                Metric::IouMask,
                iou_mask(&before_mask, &binarize_top_quantile(&after, q)?)?,
            );
            rec.value(v, Metric::Accuracy, bool_value(present == case.has_lesion));
        }
    }
    Ok(rec.records)
}

/// Compares explanations before and after randomizing model weights. A
/// faithful method changes; its gate value is one minus the highest mean
/// SSIM over modes.
pub fn run_fidelity_randomization<E: Executor>(
    harness: &Harness<'_, E>,
    cases: &[Case],
    method: CamMethod,
    opts: &RandomizationOptions,
) -> Result<Evaluation> {
    if !harness.provider.capabilities().has(Capability::Randomize) {
        return Err(Error::Capability("provider cannot randomize its weights".into()));
    }
    if opts.modes.is_empty() || opts.seeds.is_empty() || !(opts.sigma.is_finite() && opts.sigma >= 0.0) {
        return Err(Error::Config("randomization needs modes, seeds and sigma >= 0".into()));
    }
    if cases.is_empty() {
        return Err(Error::EmptyEvaluation("randomization needs cases".into()));
    }
    harness.metric.validate()?;
    let per_case = harness
        .exec
        .map(cases, |case| randomization_case(harness, case, method, opts));
    let mut seeds = BTreeMap::new();
    for (i, s) in opts.seeds.iter().enumerate() {
        seeds.insert(format!("{}/{i}", seed::RANDOMIZATION_CHECK), *s);
    }
    let mut params = BTreeMap::new();
    let modes: Vec<&str> = opts.modes.iter().map(|m| m.name()).collect();
    params.insert("modes".to_string(), modes.join(","));
    params.insert("sigma".to_string(), opts.sigma.to_string());
    let modes = opts.modes.clone();
    finish(
        harness.provider,
        RunHeader {
            protocol: "fidelity/randomization",
            criterion: Criterion::Fidelity,
            method,
            seeds,
            params,
        },
        per_case,
        move |rows| {
            let best = modes
                .iter()
                .filter_map(|m| mean_of(rows, m.name(), Metric::Ssim))
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))?;
            Some(1.0 - best)
        },
    )
}

// ---------------------------------------------------------------------------
// Single deletion

fn random_roi(case: &Case, size: usize, seed_value: u64) -> Result<Roi> {
    let (h, w) = case.image.dims();
    let mut rng = seed::rng(seed_value, case.index as u64);
    let r0 = rng.random_range(0..=h - size);
    let c0 = rng.random_range(0..=w - size);
    Roi::new(r0, c0, r0 + size, c0 + size)
}

fn single_deletion_case<E: Executor>(
    harness: &Harness<'_, E>,
    case: &Case,
    method: CamMethod,
    opts: &DeletionOptions,
) -> Result<Vec<MetricRecord>> {
    let null = harness.provider.null_score();
    let img = &case.image;
    let (w, h) = (img.width(), img.height());
    let mut session = harness.provider.session()?;
    let model: &mut dyn Model = session.as_mut();
    let heatmap = cam::explain(model, method, img)?;
    let before = model.predict(img)?;
    let fill = opts.fill.source(img);
    let mut rec = Recorder::new(case, method, Criterion::Fidelity);
    let peak = extract_peak_roi(&heatmap, opts.roi_size, opts.roi_size)?;
    let random = random_roi(case, opts.roi_size, opts.seed)?;
    for (variant, roi) in [(PEAK_ROI, peak), (RANDOM_ROI, random)] {
        let mut pixels = img.pixels().to_vec();
        paste(&mut pixels, &fill, w, &roi);
        let deleted = Image::new(w, h, pixels)?;
        let after = model.predict(&deleted)?;
        rec.value(
            variant,
            Metric::ScoreDrop,
            drop_fraction(before.score, after.score, null),
        );
        rec.value(variant, Metric::PredChange, bool_value(before.present != after.present));
        if variant == PEAK_ROI {
            let h2 = cam::explain(model, method, &deleted)?;
            rec.value(variant, Metric::Ssim, ssim(&heatmap, &h2, &harness.metric)?);
        }
    }
    Ok(rec.records)
}

/// Deletes the peak-activation square and, as a control, a random square
/// of the same size. Gate value: mean drop(peak) - mean drop(random).
pub fn run_fidelity_single_deletion<E: Executor>(
    harness: &Harness<'_, E>,
    cases: &[Case],
    method: CamMethod,
    opts: &DeletionOptions,
) -> Result<Evaluation> {
    opts.fill.validate()?;
    harness.metric.validate()?;
    let chosen = selected(cases, opts.lesion_only)?;
    let (h, w) = chosen[0].image.dims();
    if opts.roi_size == 0 || opts.roi_size > h.min(w) {
        return Err(Error::InvalidRoiSize {
            box_height: opts.roi_size,
            box_width: opts.roi_size,
            height: h,
            width: w,
        });
    }
    let per_case = harness
        .exec
        .map(&chosen, |case| single_deletion_case(harness, case, method, opts));
    let mut seeds = BTreeMap::new();
    seeds.insert(seed::DELETION.to_string(), opts.seed);
    let mut params = BTreeMap::new();
    params.insert("roi_size".to_string(), opts.roi_size.to_string());
    params.insert("fill".to_string(), opts.fill.describe());
    params.insert("lesion_only".to_string(), opts.lesion_only.to_string());
    finish(
        harness.provider,
        RunHeader {
            protocol: "fidelity/single-deletion",
            criterion: Criterion::Fidelity,
            method,
            seeds,
            params,
        },
        per_case,
        |rows| Some(mean_of(rows, PEAK_ROI, Metric::ScoreDrop)? - mean_of(rows, RANDOM_ROI, Metric::ScoreDrop)?),
    )
}

// ---------------------------------------------------------------------------
// Incremental deletion

/// `patch x patch` tiles covering the image, row-major; edge tiles may be
/// smaller.
fn tiles(height: usize, width: usize, patch: usize) -> Vec<Roi> {
    let mut out = Vec::new();
    for r0 in (0..height).step_by(patch) {
        for c0 in (0..width).step_by(patch) {
            out.push(Roi {
                row0: r0,
                col0: c0,
                row1: (r0 + patch).min(height),
                col1: (c0 + patch).min(width),
            });
        }
    }
    out
}

fn tile_means(h: &Heatmap, tiles: &[Roi]) -> Vec<f64> {
    tiles
        .iter()
        .map(|t| {
            let mut s = 0.0;
            for r in t.row0..t.row1 {
                for c in t.col0..t.col1 {
                    s += f64::from(h.get(r, c));
                }
            }
            s / t.area() as f64
        })
        .collect()
}

/// One deletion curve: normalized scores after each step, and the number
/// of leading steps the model still reports a finding.
pub struct DeletionCurve {
    pub ratios: Vec<f64>,
    pub steps_present: usize,
}

impl DeletionCurve {
    pub fn area(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }
}

fn deletion_curve(
    model: &mut dyn Model,
    img: &Image,
    fill: &[f32],
    order: &[Roi],
    steps: usize,
    base: f64,
    null: f64,
) -> Result<DeletionCurve> {
    let w = img.width();
    let mut pixels = img.pixels().to_vec();
    let mut ratios = Vec::with_capacity(steps);
    let mut steps_present = 0;
    let mut still_present = true;
    let denom = base - null;
    for tile in order.iter().take(steps) {
        paste(&mut pixels, fill, w, tile);
        let p = model.predict(&Image::new(w, img.height(), pixels.clone())?)?;
        ratios.push(if libm::fabs(denom) < cam::ABLATION_EPSILON {
            1.0
        } else {
            (p.score - null) / denom
        });
        still_present &= p.present;
        steps_present += usize::from(still_present);
    }
    Ok(DeletionCurve { ratios, steps_present })
}

/// Deletion curves of one case for one order (several for random order).
pub fn incremental_deletion_case(
    model: &mut dyn Model,
    case: &Case,
    heatmap: &Heatmap,
    order: DeletionOrder,
    opts: &IncrementalOptions,
    null: f64,
) -> Result<Vec<DeletionCurve>> {
    let img = &case.image;
    let all = tiles(img.height(), img.width(), opts.patch);
    let means = tile_means(heatmap, &all);
    let base = model.predict(img)?.score;
    let fill = opts.fill.source(img);
    let mut idx: Vec<usize> = (0..all.len()).collect();
    let orders: Vec<Vec<usize>> = match order {
        DeletionOrder::Importance => {
            idx.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
            vec![idx]
        }
        DeletionOrder::Reverse => {
            idx.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
            vec![idx]
        }
        DeletionOrder::Random => (0..opts.random_orders)
            .map(|k| {
                let mut perm = idx.clone();
                let mut rng = seed::rng(seed::mix(opts.seed, case.index as u64), k as u64);
                perm.shuffle(&mut rng);
                perm
            })
            .collect(),
    };
    orders
        .iter()
        .map(|o| {
            let rois: Vec<Roi> = o.iter().map(|&i| all[i]).collect();
            deletion_curve(model, img, &fill, &rois, opts.steps, base, null)
        })
        .collect()
}

fn incremental_case<E: Executor>(
    harness: &Harness<'_, E>,
    case: &Case,
    method: CamMethod,
    opts: &IncrementalOptions,
) -> Result<Vec<MetricRecord>> {
    let null = harness.provider.null_score();
    let mut session = harness.provider.session()?;
    let model: &mut dyn Model = session.as_mut();
    let heatmap = cam::explain(model, method, &case.image)?;
    let mut rec = Recorder::new(case, method, Criterion::Fidelity);
    for &order in &opts.orders {
        let v = order.name();
        for curve in incremental_deletion_case(model, case, &heatmap, order, opts, null)? {
            rec.value(v, Metric::DeletionArea, curve.area());
            rec.value(v, Metric::StepsPresent, curve.steps_present as f64);
            if opts.curves {
                for (t, r) in curve.ratios.iter().enumerate() {
                    rec.value(&format!("{v}:step={}", t + 1), Metric::ScoreRatio, *r);
                }
            }
        }
    }
    Ok(rec.records)
}

/// Cumulative tile deletion in importance, reverse and random order. Gate
/// value: mean area(random) - mean area(importance).
pub fn run_fidelity_incremental_deletion<E: Executor>(
    harness: &Harness<'_, E>,
    cases: &[Case],
    method: CamMethod,
    opts: &IncrementalOptions,
) -> Result<Evaluation> {
    opts.fill.validate()?;
    let chosen = selected(cases, opts.lesion_only)?;
    let (h, w) = chosen[0].image.dims();
    if opts.patch == 0 || opts.steps == 0 || opts.steps * opts.patch * opts.patch >= h * w {
        return Err(Error::Config(format!(
            "{} steps of {}px patches must cover less than the {h}x{w} image",
            opts.steps, opts.patch
        )));
    }
    if opts.orders.is_empty() || (opts.orders.contains(&DeletionOrder::Random) && opts.random_orders == 0) {
        return Err(Error::Config("incremental deletion needs at least one order".into()));
    }
    let per_case = harness
        .exec
        .map(&chosen, |case| incremental_case(harness, case, method, opts));
    let mut seeds = BTreeMap::new();
    seeds.insert(seed::DELETION.to_string(), opts.seed);
    let mut params = BTreeMap::new();
    params.insert("patch".to_string(), opts.patch.to_string());
    params.insert("steps".to_string(), opts.steps.to_string());
    let orders: Vec<&str> = opts.orders.iter().map(|o| o.name()).collect();
    params.insert("orders".to_string(), list(&orders));
    params.insert("random_orders".to_string(), opts.random_orders.to_string());
    params.insert("fill".to_string(), opts.fill.describe());
    params.insert("lesion_only".to_string(), opts.lesion_only.to_string());
    finish(
        harness.provider,
        RunHeader {
            protocol: "fidelity/incremental-deletion",
            criterion: Criterion::Fidelity,
            method,
            seeds,
            params,
        },
        per_case,
        |rows| {
            Some(
                mean_of(rows, DeletionOrder::Random.name(), Metric::DeletionArea)?
                    - mean_of(rows, DeletionOrder::Importance.name(), Metric::DeletionArea)?,
            )
        },
    )
}

// ---------------------------------------------------------------------------
// White box

/// Variant of the white-box comparison rows.
pub const WHITEBOX: &str = "whitebox";

fn whitebox_case<E: Executor>(harness: &Harness<'_, E>, case: &Case, method: CamMethod) -> Result<Vec<MetricRecord>> {
    let q = harness.metric.binarize_quantile;
    let mut session = harness.provider.session()?;
    let model: &mut dyn Model = session.as_mut();
    let h = cam::explain(model, method, &case.image)?;
    let truth = cam::explain(model, CamMethod::Whitebox, &case.image)?;
    let mut rec = Recorder::new(case, method, Criterion::Fidelity);
    rec.value(WHITEBOX, Metric::Ssim, ssim(&h, &truth, &harness.metric)?);
    rec.value(WHITEBOX, Metric::Mse, mse(&h, &truth)?);
    rec.value(
        WHITEBOX,
        Metric::IouMask,
        iou_mask(&binarize_top_quantile(&h, q)?, &binarize_top_quantile(&truth, q)?)?,
    );
    rec.push(WHITEBOX, Metric::Spearman, defined(spearman(&h, &truth))?);
    Ok(rec.records)
}

/// Compares explanations with the model's own attribution map. Gate value:
/// mean Spearman correlation.
pub fn run_fidelity_whitebox<E: Executor>(
    harness: &Harness<'_, E>,
    cases: &[Case],
    method: CamMethod,
) -> Result<Evaluation> {
    if !harness.provider.capabilities().has(Capability::Attribution) {
        return Err(Error::Capability("provider has no attribution oracle".into()));
    }
    if cases.is_empty() {
        return Err(Error::EmptyEvaluation("white-box check needs cases".into()));
    }
    harness.metric.validate()?;
    let per_case = harness.exec.map(cases, |case| whitebox_case(harness, case, method));
    let mut params = BTreeMap::new();
    params.insert(
        "binarize_quantile".to_string(),
        harness.metric.binarize_quantile.to_string(),
    );
    finish(
        harness.provider,
        RunHeader {
            protocol: "fidelity/whitebox",
            criterion: Criterion::Fidelity,
            method,
            seeds: BTreeMap::new(),
            params,
        },
        per_case,
        |rows| mean_of(rows, WHITEBOX, Metric::Spearman),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_cover_image_once() {
        let t = tiles(20, 17, 8);
        assert_eq!(t.len(), 9);
        assert_eq!(t.iter().map(|r| r.area()).sum::<usize>(), 20 * 17);
    }

    #[test]
    fn drop_fraction_guards_zero() {
        assert_eq!(drop_fraction(2.0, 1.0, 0.0), 0.5);
        assert!(drop_fraction(0.0, 0.0, 0.0).abs() < 1e-12);
    }
}
