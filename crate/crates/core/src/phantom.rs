//! Synthetic lesion / background cases with exact ground truth.
//!
//! A case is a smooth random background around a 0.5 baseline, optionally
//! with one raised-cosine disk lesion, followed by signal-dependent Gaussian
//! photon noise. Each case draws from its own ChaCha streams keyed by
//! `(seed, case_index)`, so cases can be generated in any order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter;
use crate::grid::{GroundTruth, Heatmap, Image, Roi, MIN_IMAGE_SIDE};
use crate::seed;

/// Background level every phantom is built around.
pub const BASELINE: f64 = 0.5;
/// Photon-noise variance per unit intensity at unit dose.
pub const NOISE_QUANTUM: f64 = 0.0005;

const STREAM_BACKGROUND: u64 = 0;
const STREAM_LESION: u64 = 1;
const STREAM_PHOTON: u64 = 2;

fn case_stream(index: usize, tag: u64) -> u64 {
    ((index as u64) << 2) | tag
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub background_blur_sigma: f64,
    pub background_gain: f64,
    pub lesion_radius: u32,
    pub lesion_contrast: f64,
    pub edge_softness: f64,
    pub dose: f64,
    pub seed: u64,
    /// Emit a contextual annulus `r < d <= 2r` with each lesion truth.
    pub context_annulus: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            background_blur_sigma: 10.0,
            background_gain: 0.2,
            lesion_radius: 5,
            lesion_contrast: 0.25,
            edge_softness: 1.5,
            dose: 1.0,
            seed: 0,
            context_annulus: true,
        }
    }
}

impl PhantomConfig {
    /// Distance kept between the lesion centre and the image border.
    pub fn margin(&self) -> usize {
        2 * self.lesion_radius as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.width < MIN_IMAGE_SIDE || self.height < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "phantom {}x{} below the {MIN_IMAGE_SIDE}px minimum",
                self.height, self.width
            )));
        }
        if self.lesion_radius == 0 {
            return Err(Error::Config("lesion radius must be at least 1".into()));
        }
        let m = self.margin();
        if self.width < 2 * m + 1 || self.height < 2 * m + 1 {
            return Err(Error::Config(format!(
                "a radius-{} lesion with a {m}px margin cannot fit a {}x{} image",
                self.lesion_radius, self.height, self.width
            )));
        }
        if !positive(self.dose) {
            return Err(Error::Config(format!("dose must be > 0, got {}", self.dose)));
        }
        if !positive(self.lesion_contrast) {
            return Err(Error::Config("lesion contrast must be > 0".into()));
        }
        if !positive(self.background_blur_sigma) {
            return Err(Error::Config("background blur sigma must be > 0".into()));
        }
        if !(self.background_gain.is_finite() && self.background_gain >= 0.0) {
            return Err(Error::Config("background gain must be >= 0".into()));
        }
        if !(self.edge_softness.is_finite()
            && self.edge_softness >= 0.0
            && self.edge_softness <= f64::from(self.lesion_radius))
        {
            return Err(Error::Config("edge softness must lie in [0, lesion radius]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub index: usize,
    pub image: Image,
    pub has_lesion: bool,
    pub truth: Option<GroundTruth>,
    /// Configuration the case was generated from.
    pub provenance: PhantomConfig,
}

/// Noise-free image plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub pixels: Vec<f64>,
    pub truth: Option<GroundTruth>,
}

pub fn case_id(index: usize) -> String {
    format!("case-{index:04}")
}

/// Lesion amplitude (as a fraction of contrast) at distance `d` from the
/// centre: 1 inside `r - s/2`, 0 beyond `r + s/2`, raised cosine between.
pub fn lesion_profile(d: f64, radius: f64, softness: f64) -> f64 {
    let inner = radius - softness / 2.0;
    let outer = radius + softness / 2.0;
    if d <= inner {
        1.0
    } else if d >= outer {
        0.0
    } else {
        0.5 * (1.0 + libm::cos(core::f64::consts::PI * (d - inner) / softness))
    }
}

fn background(cfg: &PhantomConfig, index: usize) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = seed::rng(cfg.seed, case_stream(index, STREAM_BACKGROUND));
    let white: Vec<f64> = (0..w * h).map(|_| StandardNormal.sample(&mut rng)).collect();
    let taps = filter::gaussian_taps(cfg.background_blur_sigma, 4.0);
    // separable filter: output variance is (sum of squared taps)^2
    let unit = 1.0 / taps.iter().map(|t| t * t).sum::<f64>();
    let mut field = filter::separable(&white, w, h, &taps);
    for v in &mut field {
        *v = BASELINE + cfg.background_gain * unit * *v;
    }
    field
}

fn lesion_center(cfg: &PhantomConfig, index: usize) -> (usize, usize) {
    let mut rng = seed::rng(cfg.seed, case_stream(index, STREAM_LESION));
    let m = cfg.margin();
    let r = rng.random_range(m..=cfg.height - 1 - m);
    let c = rng.random_range(m..=cfg.width - 1 - m);
    (r, c)
}

fn distance(r: usize, c: usize, center: (usize, usize)) -> f64 {
    let dr = r as f64 - center.0 as f64;
    let dc = c as f64 - center.1 as f64;
    libm::sqrt(dr * dr + dc * dc)
}

fn ground_truth(cfg: &PhantomConfig, center: (usize, usize)) -> Result<GroundTruth> {
    let (w, h) = (cfg.width, cfg.height);
    let r = cfg.lesion_radius as usize;
    let radius = f64::from(cfg.lesion_radius);
    let bbox = Roi::new(
        center.0.saturating_sub(r),
        center.1.saturating_sub(r),
        (center.0 + r + 1).min(h),
        (center.1 + r + 1).min(w),
    )?;
    let mut mask = vec![0.0f32; w * h];
    for row in bbox.row0..bbox.row1 {
        for col in bbox.col0..bbox.col1 {
            let p = lesion_profile(distance(row, col, center), radius, cfg.edge_softness);
            mask[row * w + col] = p as f32;
        }
    }
    let context = if cfg.context_annulus {
        let ring = (0..w * h)
            .map(|i| {
                let d = distance(i / w, i % w, center);
                if d > radius && d <= 2.0 * radius {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Some(Heatmap::new(w, h, ring)?)
    } else {
        None
    };
    Ok(GroundTruth {
        center,
        radius: cfg.lesion_radius,
        bbox,
        mask: Heatmap::new(w, h, mask)?,
        context,
    })
}

/// The noise-free image of case `index`.
pub fn noiseless_composite(cfg: &PhantomConfig, with_lesion: bool, index: usize) -> Result<Composite> {
    cfg.validate()?;
    let mut pixels = background(cfg, index);
    let truth = if with_lesion {
        let center = lesion_center(cfg, index);
        let radius = f64::from(cfg.lesion_radius);
        let reach = libm::ceil(radius + cfg.edge_softness / 2.0) as usize;
        let (w, h) = (cfg.width, cfg.height);
        for row in center.0.saturating_sub(reach)..(center.0 + reach + 1).min(h) {
            for col in center.1.saturating_sub(reach)..(center.1 + reach + 1).min(w) {
                let p = lesion_profile(distance(row, col, center), radius, cfg.edge_softness);
                pixels[row * w + col] += cfg.lesion_contrast * p;
            }
        }
        Some(ground_truth(cfg, center)?)
    } else {
        None
    };
    // Deep background troughs can dip below zero; intensities cannot.
    pixels.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(Composite { pixels, truth })
}

/// Adds `N(0, v * NOISE_QUANTUM / dose)` to every pixel and clips at zero.
/// One normal deviate is drawn per pixel regardless of dose, so the same
/// stream at different doses yields paired (scaled) noise.
pub fn photon_noise_with(composite: &[f64], dose: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let scale = NOISE_QUANTUM / dose;
    composite
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            let sd = libm::sqrt(v.max(0.0) * scale);
            (v + z * sd).max(0.0) as f32
        })
        .collect()
}

/// The case's own photon-noise stream.
pub fn photon_stream(cfg: &PhantomConfig, index: usize) -> ChaCha8Rng {
    seed::rng(cfg.seed, case_stream(index, STREAM_PHOTON))
}

pub fn generate_case(cfg: &PhantomConfig, with_lesion: bool, index: usize) -> Result<Case> {
    let composite = noiseless_composite(cfg, with_lesion, index)?;
    let pixels = photon_noise_with(&composite.pixels, cfg.dose, &mut photon_stream(cfg, index));
    Ok(Case {
        id: case_id(index),
        index,
        image: Image::new(cfg.width, cfg.height, pixels)?,
        has_lesion: with_lesion,
        truth: composite.truth,
        provenance: cfg.clone(),
    })
}

/// Which indices of an `n`-case dataset carry a lesion: exactly
/// `round(n * fraction)` of them, spread evenly.
pub fn dataset_plan(n_cases: usize, lesion_fraction: f64) -> Result<Vec<bool>> {
    if n_cases < 2 {
        return Err(Error::Config(format!(
            "a dataset needs at least 2 cases, got {n_cases}"
        )));
    }
    if !(0.0..=1.0).contains(&lesion_fraction) {
        return Err(Error::Config(format!(
            "lesion fraction {lesion_fraction} outside [0, 1]"
        )));
    }
    let k = libm::round(n_cases as f64 * lesion_fraction) as usize;
    Ok((0..n_cases).map(|i| (i + 1) * k / n_cases > i * k / n_cases).collect())
}

pub fn generate_dataset(cfg: &PhantomConfig, n_cases: usize, lesion_fraction: f64) -> Result<Vec<Case>> {
    dataset_plan(n_cases, lesion_fraction)?
        .into_iter()
        .enumerate()
        .map(|(i, lesion)| generate_case(cfg, lesion, i))
        .collect()
}
