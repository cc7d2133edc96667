//! Images, heatmaps, regions and the shared heatmap post-processing used by
//! every criterion.
//!
//! All grids are row-major `f32`. Computation that accumulates (filtering,
//! metrics) widens to `f64` internally and narrows once on output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {height}x{width} grid",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite pixel at index {i}")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| f64::from(v)).collect()
    }
}

/// A per-pixel relevance map. Soft ground-truth masks use the same type with
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl Heatmap {
    /// An un-normalized map. Values must be finite.
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height || width == 0 || height == 0 {
            return Err(Error::InvalidHeatmap(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidHeatmap(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            values,
            normalized: false,
        })
    }

    /// Marks an already-normalized map, checking the invariant.
    pub fn new_normalized(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let mut h = Self::new(width, height, values)?;
        let max = h.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let out_of_range = h.values.iter().any(|&v| !(0.0..=1.0).contains(&v));
        if out_of_range || !(max == 1.0 || max == 0.0) {
            return Err(Error::InvalidHeatmap(
                "normalized maps must lie in [0,1] with max 1 (or be all zero)".into(),
            ));
        }
        h.normalized = true;
        Ok(h)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            normalized: true,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let i = argmax_first(self.values.iter().map(|&v| f64::from(v)));
        (i / self.width, i % self.width)
    }
}

pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Half-open pixel rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Roi {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Result<Self> {
        if row0 >= row1 || col0 >= col1 {
            return Err(Error::Config(format!(
                "empty roi rows [{row0},{row1}) cols [{col0},{col1})"
            )));
        }
        Ok(Self { row0, col0, row1, col1 })
    }

    /// Checks the roi lies inside a `height x width` grid.
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1 && self.row1 <= height && self.col1 <= width
    }

    /// A `box_height x box_width` box centred on `center`, translated (never
    /// shrunk) to lie inside the grid.
    pub fn centered(
        center: (usize, usize),
        box_height: usize,
        box_width: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if box_height == 0 || box_width == 0 || box_height > height || box_width > width {
            return Err(Error::InvalidRoiSize {
                box_height,
                box_width,
                height,
                width,
            });
        }
        let place = |c: usize, size: usize, extent: usize| c.saturating_sub(size / 2).min(extent - size);
        let row0 = place(center.0, box_height, height);
        let col0 = place(center.1, box_width, width);
        Ok(Self {
            row0,
            col0,
            row1: row0 + box_height,
            col1: col0 + box_width,
        })
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn intersection_area(&self, other: &Roi) -> usize {
        let h = self.row1.min(other.row1).saturating_sub(self.row0.max(other.row0));
        let w = self.col1.min(other.col1).saturating_sub(self.col0.max(other.col0));
        h * w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.row0, self.col0, self.row1, self.col1]
    }
}

/// Binary mask over a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape {
                left: (height, width),
                right: (bits.len(), 1),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_roi(width: usize, height: usize, roi: &Roi) -> Self {
        let mut m = Self::empty(width, height);
        for r in roi.row0..roi.row1.min(height) {
            for c in roi.col0..roi.col1.min(width) {
                m.bits[r * width + c] = true;
            }
        }
        m
    }

    /// Pixels where `map >= threshold`.
    pub fn at_least(map: &Heatmap, threshold: f32) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            bits: map.values().iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        check_dims(self.dims(), other.dims())?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Tight bounding box of the set pixels, `None` when empty.
    pub fn bounding_box(&self) -> Option<Roi> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let (r, c) = (i / self.width, i % self.width);
            bounds = Some(match bounds {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
        bounds.map(|(r0, c0, r1, c1)| Roi {
            row0: r0,
            col0: c0,
            row1: r1 + 1,
            col1: c1 + 1,
        })
    }
}

pub(crate) fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape { left: a, right: b });
    }
    Ok(())
}

/// Two-level lesion ground truth: the direct lesion annotation plus an
/// optional contextual annulus around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub center: (usize, usize),
    pub radius: u32,
    #[serde(rename = "box")]
    pub bbox: Roi,
    /// Soft lesion mask in `[0,1]`, zero outside `bbox`.
    pub mask: Heatmap,
    /// Contextual annulus (1 inside the ring), when generated.
    pub context: Option<Heatmap>,
}

impl GroundTruth {
    /// Pixels of the soft mask at or above one half.
    pub fn lesion_mask(&self) -> Mask {
        Mask::at_least(&self.mask, 0.5)
    }

    /// Lesion box united with the context support, if a context is present.
    pub fn context_region(&self) -> Option<Mask> {
        let ctx = self.context.as_ref()?;
        let (h, w) = (self.mask.height(), self.mask.width());
        let boxed = Mask::from_roi(w, h, &self.bbox);
        let ring = Mask::at_least(ctx, f32::MIN_POSITIVE);
        boxed.union(&ring).ok()
    }

    /// Soft map for the context tier: the lesion mask, with the annulus
    /// filled in at full weight.
    pub fn context_soft_mask(&self) -> Option<Heatmap> {
        let ctx = self.context.as_ref()?;
        let values = self
            .mask
            .values()
            .iter()
            .zip(ctx.values())
            .map(|(&m, &c)| m.max(c))
            .collect();
        Heatmap::new(self.mask.width(), self.mask.height(), values).ok()
    }
}

/// Constants shared by the similarity metrics and heatmap binarization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub dynamic_range: f64,
    pub binarize_quantile: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            ssim_window: 11,
            ssim_sigma: 1.5,
            dynamic_range: 1.0,
            binarize_quantile: 0.95,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ssim window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if !(self.ssim_k1 > 0.0 && self.ssim_k2 > 0.0) {
            return Err(Error::Config("ssim k1 and k2 must be positive".into()));
        }
        if !(self.ssim_sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::Config("ssim sigma and dynamic range must be positive".into()));
        }
        if !(self.binarize_quantile > 0.0 && self.binarize_quantile < 1.0) {
            return Err(Error::InvalidQuantile(self.binarize_quantile));
        }
        Ok(())
    }
}

/// Min-max normalization to `[0,1]`; constant maps become all-zero.
pub fn normalize_heatmap(h: &Heatmap) -> Result<Heatmap> {
    let (lo, hi) = h
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            let v = f64::from(v);
            (lo.min(v), hi.max(v))
        });
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidHeatmap("non-finite values".into()));
    }
    Ok(normalize_range(
        h.width,
        h.height,
        h.values.iter().map(|&v| f64::from(v)),
        lo,
        hi,
    ))
}

/// Min-max normalization of an `f64` buffer.
pub(crate) fn normalize_f64(width: usize, height: usize, values: &[f64]) -> Result<Heatmap> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidHeatmap("non-finite values".into()));
    }
    Ok(normalize_range(width, height, values.iter().copied(), lo, hi))
}

fn normalize_range(width: usize, height: usize, values: impl Iterator<Item = f64>, lo: f64, hi: f64) -> Heatmap {
    let values = if hi > lo {
        let span = hi - lo;
        values.map(|v| ((v - lo) / span) as f32).collect()
    } else {
        vec![0.0; width * height]
    };
    Heatmap {
        width,
        height,
        values,
        normalized: true,
    }
}

/// Box of the requested size centred on the heatmap's first maximum.
pub fn extract_peak_roi(h: &Heatmap, box_height: usize, box_width: usize) -> Result<Roi> {
    Roi::centered(h.argmax(), box_height, box_width, h.height, h.width)
}

/// Linear-interpolation quantile of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Linear-interpolation quantile of arbitrary values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

/// Marks pixels at or above the `q`-quantile of the map. Zero-valued pixels
/// are never marked, so an all-zero map yields an empty mask.
pub fn binarize_top_quantile(h: &Heatmap, q: f64) -> Result<Mask> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidQuantile(q));
    }
    let values: Vec<f64> = h.values.iter().map(|&v| f64::from(v)).collect();
    let t = quantile(&values, q);
    Ok(Mask {
        width: h.width,
        height: h.height,
        bits: values.iter().map(|&v| v >= t && v > 0.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, v: &[f32]) -> Heatmap {
        Heatmap::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_heatmap(&map(3, 1, &[0.0, 2.0, 4.0])).unwrap();
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
        assert!(n.is_normalized());
        let n = normalize_heatmap(&map(3, 1, &[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(n.values(), &[0.0, 0.0, 0.0]);
        assert!(n.is_normalized());
        let n = normalize_heatmap(&map(3, 1, &[-1.0, 0.0, 1.0])).unwrap();
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn non_finite_heatmap_rejected() {
        assert!(matches!(
            Heatmap::new(2, 1, vec![0.0, f32::NAN]),
            Err(Error::InvalidHeatmap(_))
        ));
    }

    #[test]
    fn image_invariants() {
        assert!(Image::filled(7, 8, 0.0).is_err());
        assert!(Image::new(8, 8, vec![0.0; 63]).is_err());
        let mut px = vec![0.0; 64];
        px[3] = f32::INFINITY;
        assert!(Image::new(8, 8, px).is_err());
    }

    #[test]
    fn peak_roi_examples() {
        let mut v = vec![0.0f32; 64 * 64];
        v[10 * 64 + 12] = 1.0;
        let roi = extract_peak_roi(&map(64, 64, &v), 9, 9).unwrap();
        assert_eq!((roi.row0, roi.row1, roi.col0, roi.col1), (6, 15, 8, 17));

        let flat = map(64, 64, &vec![0.3; 64 * 64]);
        let roi = extract_peak_roi(&flat, 9, 9).unwrap();
        assert_eq!((roi.row0, roi.row1, roi.col0, roi.col1), (0, 9, 0, 9));

        let mut v = vec![0.0f32; 64 * 64];
        v[63] = 1.0;
        let roi = extract_peak_roi(&map(64, 64, &v), 9, 9).unwrap();
        assert_eq!((roi.row0, roi.row1, roi.col0, roi.col1), (0, 9, 55, 64));

        assert!(matches!(
            extract_peak_roi(&flat, 65, 9),
            Err(Error::InvalidRoiSize { .. })
        ));
    }

    /// Enumerates every in-bounds placement containing the argmax and keeps
    /// the ones whose centre is closest to it.
    fn clamp_oracle(p: (usize, usize), bh: usize, bw: usize, h: usize, w: usize) -> Vec<Roi> {
        let mut best = Vec::new();
        let mut best_d = usize::MAX;
        for r0 in 0..=h - bh {
            for c0 in 0..=w - bw {
                let roi = Roi {
                    row0: r0,
                    col0: c0,
                    row1: r0 + bh,
                    col1: c0 + bw,
                };
                if !roi.contains(p.0, p.1) {
                    continue;
                }
                let d = (r0 + bh / 2).abs_diff(p.0) + (c0 + bw / 2).abs_diff(p.1);
                if d < best_d {
                    best_d = d;
                    best.clear();
                }
                if d == best_d {
                    best.push(roi);
                }
            }
        }
        best
    }

    #[test]
    fn peak_roi_matches_clamping_oracle() {
        for &p in &[(0usize, 63usize), (63, 0), (2, 30), (60, 61), (31, 31)] {
            let mut v = vec![0.0f32; 64 * 64];
            v[p.0 * 64 + p.1] = 1.0;
            let roi = extract_peak_roi(&map(64, 64, &v), 9, 9).unwrap();
            let oracle = clamp_oracle(p, 9, 9, 64, 64);
            assert_eq!(oracle.len(), 1);
            assert_eq!(roi, oracle[0], "peak {p:?}");
        }
    }

    #[test]
    fn binarize_ramp_matches_sort_and_count() {
        let ramp: Vec<f32> = (0..100).map(|i| i as f32 / 99.0).collect();
        let m = binarize_top_quantile(&map(10, 10, &ramp), 0.95).unwrap();
        // oracle: sort, interpolate threshold, count values at or above it
        let mut sorted: Vec<f64> = ramp.iter().map(|&v| f64::from(v)).collect();
        sorted.sort_by(f64::total_cmp);
        let pos = 0.95 * 99.0;
        let t = sorted[94] + (pos - 94.0) * (sorted[95] - sorted[94]);
        let expected = sorted.iter().filter(|&&v| v >= t).count();
        assert_eq!(expected, 5);
        assert_eq!(m.count(), expected);
        assert!(m.bits()[95..].iter().all(|&b| b));
    }

    #[test]
    fn binarize_degenerate_and_two_valued() {
        let zeros = Heatmap::zeros(8, 8);
        assert_eq!(binarize_top_quantile(&zeros, 0.95).unwrap().count(), 0);

        let v: Vec<f32> = (0..64).map(|i| if i % 8 >= 4 { 1.0 } else { 0.0 }).collect();
        let m = binarize_top_quantile(&map(8, 8, &v), 0.5).unwrap();
        for (i, &b) in m.bits().iter().enumerate() {
            assert_eq!(b, i % 8 >= 4);
        }
        assert!(matches!(
            binarize_top_quantile(&zeros, 1.0),
            Err(Error::InvalidQuantile(_))
        ));
        assert!(binarize_top_quantile(&zeros, 0.0).is_err());
    }

    #[test]
    fn metric_params_validation() {
        assert!(MetricParams::default().validate().is_ok());
        let p = MetricParams {
            ssim_window: 10,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = MetricParams {
            binarize_quantile: 1.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn mask_bounding_box() {
        let roi = Roi::new(2, 3, 5, 7).unwrap();
        let m = Mask::from_roi(10, 10, &roi);
        assert_eq!(m.bounding_box(), Some(roi));
        assert_eq!(Mask::empty(4, 4).bounding_box(), None);
    }
}
