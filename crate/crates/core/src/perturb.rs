//! Input perturbations for the consistency protocol and the inverse maps
//! that bring heatmaps back to the original frame.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Heatmap, Image};
use crate::phantom::{self, PhantomConfig, BASELINE, NOISE_QUANTUM};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Dose,
    Rotation,
    Shift,
}

impl PerturbationKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::Dose => "dose",
            PerturbationKind::Rotation => "rotation",
            PerturbationKind::Shift => "shift",
        }
    }
}

/// A perturbation axis and the levels to evaluate along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub levels: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn dose(levels: &[f64]) -> Self {
        Self {
            kind: PerturbationKind::Dose,
            levels: levels.to_vec(),
            seed: 0,
        }
    }

    pub fn rotation(levels: &[f64]) -> Self {
        Self {
            kind: PerturbationKind::Rotation,
            levels: levels.to_vec(),
            seed: 0,
        }
    }

    pub fn shift(levels: &[f64]) -> Self {
        Self {
            kind: PerturbationKind::Shift,
            levels: levels.to_vec(),
            seed: 0,
        }
    }

    /// The default grids: dose {1, 0.5, 0.25, 0.1}, rotation
    /// {0, 5, 10, 20, 35, 50} degrees and shifts {0, ±2, ±5} pixels.
    pub fn default_grids() -> Vec<Self> {
        vec![
            Self::dose(&[1.0, 0.5, 0.25, 0.1]),
            Self::rotation(&[0.0, 5.0, 10.0, 20.0, 35.0, 50.0]),
            Self::shift(&[0.0, -5.0, -2.0, 2.0, 5.0]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config(format!("{} spec has no levels", self.kind.name())));
        }
        for &l in &self.levels {
            let ok = l.is_finite()
                && match self.kind {
                    PerturbationKind::Dose => l > 0.0,
                    PerturbationKind::Rotation => libm::fabs(l) <= 180.0,
                    PerturbationKind::Shift => libm::round(l) == l,
                };
            if !ok {
                return Err(Error::Config(format!("invalid {} level {l}", self.kind.name())));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the shift bound for a
    /// `height x width` input.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.kind == PerturbationKind::Shift {
            for &l in &self.levels {
                check_shift(l as i64, l as i64, height, width)?;
            }
        }
        Ok(())
    }

    /// Variant label: `dose=<f>`, `rot=<deg>` or `shift=<d>,<d>`.
    pub fn variant(&self, level: f64) -> String {
        match self.kind {
            PerturbationKind::Dose => format!("dose={level}"),
            PerturbationKind::Rotation => format!("rot={level}"),
            PerturbationKind::Shift => format!("shift={level},{level}"),
        }
    }

    /// Whether `level` leaves the input untouched.
    pub fn is_identity(&self, level: f64) -> bool {
        match self.kind {
            PerturbationKind::Dose => level == 1.0,
            PerturbationKind::Rotation | PerturbationKind::Shift => level == 0.0,
        }
    }
}

/// Where a dose change gets its noise from.
#[derive(Debug, Clone, Copy)]
pub enum DoseSource<'a> {
    /// Re-noise the stored noiseless composite of a phantom case.
    Phantom {
        cfg: &'a PhantomConfig,
        index: usize,
        has_lesion: bool,
    },
    /// Add extra noise on top of the given image; only lowers dose.
    Additive { seed: u64 },
}

/// Image at `factor` times the nominal dose. The flag is true when the
/// additive fallback was used.
///
/// The phantom path redraws photon noise from the case's own stream, so
/// `factor = 1` reproduces the case bit-exactly and other factors give
/// paired noise that differs only in amplitude.
pub fn apply_dose(img: &Image, factor: f64, source: DoseSource<'_>) -> Result<(Image, bool)> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Config(format!("dose factor must be > 0, got {factor}")));
    }
    match source {
        DoseSource::Phantom { cfg, index, has_lesion } => {
            let composite = phantom::noiseless_composite(cfg, has_lesion, index)?;
            if (cfg.width, cfg.height) != (img.width(), img.height()) {
                return Err(Error::Shape {
                    left: img.dims(),
                    right: (cfg.height, cfg.width),
                });
            }
            let pixels = phantom::photon_noise_with(
                &composite.pixels,
                cfg.dose * factor,
                &mut phantom::photon_stream(cfg, index),
            );
            Ok((Image::new(cfg.width, cfg.height, pixels)?, false))
        }
        DoseSource::Additive { seed } => {
            if factor == 1.0 {
                return Ok((img.clone(), true));
            }
            if factor > 1.0 {
                return Err(Error::Config(format!(
                    "dose factor {factor} > 1 needs the noiseless composite"
                )));
            }
            let mut rng = seed::rng(seed, 0);
            let scale = NOISE_QUANTUM * (1.0 / factor - 1.0);
            let pixels = img
                .pixels()
                .iter()
                .map(|&v| {
                    let v = f64::from(v);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (v + z * libm::sqrt(v.max(0.0) * scale)).max(0.0) as f32
                })
                .collect();
            Ok((Image::new(img.width(), img.height(), pixels)?, true))
        }
    }
}

/// Exact `(cos, sin)` at multiples of 90 degrees.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let q = degrees / 90.0;
    if libm::round(q) == q {
        match (q as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (libm::cos(r), libm::sin(r))
    }
}

fn bilinear(src: &[f32], width: usize, height: usize, r: f64, c: f64, fill: f32) -> f32 {
    let (hmax, wmax) = ((height - 1) as f64, (width - 1) as f64);
    if !(0.0..=hmax).contains(&r) || !(0.0..=wmax).contains(&c) {
        return fill;
    }
    let (r0, c0) = (libm::floor(r), libm::floor(c));
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as usize, c0 as usize);
    let at = |i: usize, j: usize| f64::from(src[i * width + j]);
    if fr == 0.0 && fc == 0.0 {
        return src[r0 * width + c0];
    }
    let (r1, c1) = ((r0 + 1).min(height - 1), (c0 + 1).min(width - 1));
    let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
    let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
    (top * (1.0 - fr) + bottom * fr) as f32
}

/// Counter-clockwise rotation (as displayed, rows pointing down) about the
/// grid centre with bilinear interpolation.
fn rotate_grid(src: &[f32], width: usize, height: usize, degrees: f64, fill: f32) -> Vec<f32> {
    let (cos, sin) = cos_sin(degrees);
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let mut out = vec![fill; width * height];
    for i in 0..height {
        let dy = i as f64 - cy;
        for j in 0..width {
            let dx = j as f64 - cx;
            let sr = cy + dy * cos + dx * sin;
            let sc = cx - dy * sin + dx * cos;
            out[i * width + j] = bilinear(src, width, height, sr, sc, fill);
        }
    }
    out
}

fn check_degrees(degrees: f64) -> Result<()> {
    if degrees.is_finite() && libm::fabs(degrees) <= 180.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "rotation must be within ±180 degrees, got {degrees}"
        )))
    }
}

/// Rotation about the image centre, out-of-domain pixels set to the
/// background baseline.
pub fn rotate(img: &Image, degrees: f64) -> Result<Image> {
    check_degrees(degrees)?;
    let out = rotate_grid(img.pixels(), img.width(), img.height(), degrees, BASELINE as f32);
    Image::new(img.width(), img.height(), out)
}

/// Brings a heatmap computed on an image rotated by `degrees` back to the
/// original frame (fill 0) and renormalizes it.
pub fn reregister_heatmap(h: &Heatmap, degrees: f64) -> Result<Heatmap> {
    check_degrees(degrees)?;
    let out = rotate_grid(h.values(), h.width(), h.height(), -degrees, 0.0);
    grid::normalize_heatmap(&Heatmap::new(h.width(), h.height(), out)?)
}

fn check_shift(dr: i64, dc: i64, height: usize, width: usize) -> Result<()> {
    if (dr.unsigned_abs() as usize) * 4 < height && (dc.unsigned_abs() as usize) * 4 < width {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "shift ({dr},{dc}) must stay below a quarter of {height}x{width}"
        )))
    }
}

fn shift_grid(src: &[f32], width: usize, height: usize, dr: i64, dc: i64, fill: f32) -> Vec<f32> {
    let mut out = vec![fill; width * height];
    for i in 0..height as i64 {
        let si = i - dr;
        if si < 0 || si >= height as i64 {
            continue;
        }
        for j in 0..width as i64 {
            let sj = j - dc;
            if sj >= 0 && sj < width as i64 {
                out[(i as usize) * width + j as usize] = src[(si as usize) * width + sj as usize];
            }
        }
    }
    out
}

/// Integer translation by `(dr, dc)`, vacated pixels set to the baseline.
pub fn shift(img: &Image, dr: i64, dc: i64) -> Result<Image> {
    check_shift(dr, dc, img.height(), img.width())?;
    let out = shift_grid(img.pixels(), img.width(), img.height(), dr, dc, BASELINE as f32);
    Image::new(img.width(), img.height(), out)
}

/// Inverse of [`shift`] for heatmaps: translate by `(-dr, -dc)`, fill 0,
/// renormalize.
pub fn unshift_heatmap(h: &Heatmap, dr: i64, dc: i64) -> Result<Heatmap> {
    check_shift(dr, dc, h.height(), h.width())?;
    let out = shift_grid(h.values(), h.width(), h.height(), -dr, -dc, 0.0);
    grid::normalize_heatmap(&Heatmap::new(h.width(), h.height(), out)?)
}

/// Maps a point of the perturbed frame back to the original frame.
pub fn map_point_back(kind: PerturbationKind, level: f64, point: (f64, f64), dims: (usize, usize)) -> (f64, f64) {
    match kind {
        PerturbationKind::Dose => point,
        PerturbationKind::Shift => (point.0 - level, point.1 - level),
        PerturbationKind::Rotation => {
            let (cos, sin) = cos_sin(level);
            let (cy, cx) = ((dims.0 as f64 - 1.0) / 2.0, (dims.1 as f64 - 1.0) / 2.0);
            let (dy, dx) = (point.0 - cy, point.1 - cx);
            (cy + dy * cos + dx * sin, cx - dy * sin + dx * cos)
        }
    }
}
