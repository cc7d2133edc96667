//! Heatmap comparison metrics and the record/aggregate types every protocol
//! emits.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::cam::CamMethod;
use crate::error::{Error, Result};
use crate::grid::{check_dims, Heatmap, Mask, MetricParams, Roi};

pub fn mse(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.values().len() as f64)
}

/// Gaussian window taps of exactly `size` samples.
fn window_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|x| libm::exp(-((x * x) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable correlation over fully contained windows only.
fn valid_filter(src: &[f64], width: usize, height: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut tmp = vec![0.0; ow * height];
    for r in 0..height {
        let row = &src[r * width..(r + 1) * width];
        for c in 0..ow {
            tmp[r * ow + c] = taps.iter().zip(&row[c..c + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let srow = &tmp[(r + k) * ow..(r + k + 1) * ow];
            for (d, s) in out[r * ow..(r + 1) * ow].iter_mut().zip(srow) {
                *d += t * s;
            }
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM over every window position fully inside the map.
pub fn ssim(a: &Heatmap, b: &Heatmap, p: &MetricParams) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    p.validate()?;
    let (h, w) = a.dims();
    if h < p.ssim_window || w < p.ssim_window {
        return Err(Error::InputTooSmall {
            height: h,
            width: w,
            required: p.ssim_window,
        });
    }
    let taps = window_taps(p.ssim_window, p.ssim_sigma);
    let x: Vec<f64> = a.values().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.values().iter().map(|&v| f64::from(v)).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
    let (mx, ..) = valid_filter(&x, w, h, &taps);
    let (my, ..) = valid_filter(&y, w, h, &taps);
    let (mxx, ..) = valid_filter(&xx, w, h, &taps);
    let (myy, ..) = valid_filter(&yy, w, h, &taps);
    let (mxy, ..) = valid_filter(&xy, w, h, &taps);
    let c1 = (p.ssim_k1 * p.dynamic_range) * (p.ssim_k1 * p.dynamic_range);
    let c2 = (p.ssim_k2 * p.dynamic_range) * (p.ssim_k2 * p.dynamic_range);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

pub fn iou_box(a: &Roi, b: &Roi) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Set IoU; two empty masks agree perfectly.
pub fn iou_mask(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation of two equally long samples.
pub fn spearman_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let (ra, rb) = (midranks(a), midranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("spearman correlation of a constant input"));
    }
    Ok((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

pub fn spearman(h: &Heatmap, g: &Heatmap) -> Result<f64> {
    check_dims(h.dims(), g.dims())?;
    let a: Vec<f64> = h.values().iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = g.values().iter().map(|&v| f64::from(v)).collect();
    spearman_values(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Consistency,
    Plausibility,
    Fidelity,
}

impl Criterion {
    /// Evaluation order.
    pub const ORDER: [Criterion; 3] = [Criterion::Consistency, Criterion::Plausibility, Criterion::Fidelity];

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Consistency => "consistency",
            Criterion::Plausibility => "plausibility",
            Criterion::Fidelity => "fidelity",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ssim,
    Mse,
    IouBox,
    IouMask,
    Spearman,
    /// Presence classification correct.
    Accuracy,
    /// Classification correct and, on lesion cases, predicted box IoU >= 0.5.
    AccuracyLoc,
    /// Score drop as a fraction of the score above the null score.
    ScoreDrop,
    PredChange,
    /// Mean normalized score over an incremental deletion curve.
    DeletionArea,
    /// Deletion steps after which the model still reports a finding.
    StepsPresent,
    /// One point of an incremental deletion curve.
    ScoreRatio,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Mse => "mse",
            Metric::IouBox => "iou_box",
            Metric::IouMask => "iou_mask",
            Metric::Spearman => "spearman",
            Metric::Accuracy => "accuracy",
            Metric::AccuracyLoc => "accuracy_loc",
            Metric::ScoreDrop => "score_drop",
            Metric::PredChange => "pred_change",
            Metric::DeletionArea => "deletion_area",
            Metric::StepsPresent => "steps_present",
            Metric::ScoreRatio => "score_ratio",
        }
    }

    /// Closed range of valid values, where the metric has one.
    pub fn range(&self) -> Option<(f64, f64)> {
        match self {
            Metric::Ssim | Metric::Spearman => Some((-1.0, 1.0)),
            Metric::IouBox | Metric::IouMask | Metric::Accuracy | Metric::AccuracyLoc | Metric::PredChange => {
                Some((0.0, 1.0))
            }
            Metric::Mse | Metric::StepsPresent => Some((0.0, f64::INFINITY)),
            Metric::ScoreDrop | Metric::DeletionArea | Metric::ScoreRatio => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One metric value for one case. `value` is `None` when the metric is
/// undefined for the case (e.g. Spearman against a constant map).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub case_id: String,
    pub method: CamMethod,
    pub criterion: Criterion,
    pub variant: String,
    pub metric: Metric,
    pub value: Option<f64>,
}

/// Mean and population standard deviation of the defined values of one
/// (variant, metric) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Records whose value was undefined.
    #[serde(default)]
    pub missing: usize,
}

/// Groups records by (variant, metric) in order of first appearance. Groups
/// with no defined value produce no row.
pub fn aggregate(records: &[MetricRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(&str, Metric)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(v, m)| v == r.variant && m == r.metric) {
            keys.push((&r.variant, r.metric));
        }
    }
    keys.into_iter()
        .filter_map(|(variant, metric)| {
            let group = records.iter().filter(|r| r.variant == variant && r.metric == metric);
            let values: Vec<f64> = group.clone().filter_map(|r| r.value).collect();
            let missing = group.count() - values.len();
            let (mean, std) = mean_std(&values)?;
            Some(AggregateRow {
                variant: variant.into(),
                metric,
                mean,
                std,
                n: values.len(),
                missing,
            })
        })
        .collect()
}

/// Mean and population standard deviation; `None` for an empty sample.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, libm::sqrt(var)))
}
