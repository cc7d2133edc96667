//! Transparent reference detector: a fixed bank of zero-mean matched filters
//! followed by a linear head.
//!
//! Features are `ReLU(kernel ⋆ (image - local_mean))` with a 15x15 boxcar
//! local mean and mirror padding. The decision map is the head-weighted sum
//! of features; the detection score is its maximum plus the bias. Signal
//! channels are disk detectors; distractor channels (long edges, Laplacian)
//! respond to background structure and carry zero head weight by default.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{self, Kernel};
use crate::grid::{self, argmax_first, Heatmap, Image, Roi};
use crate::phantom::{self, PhantomConfig};
use crate::seed;

pub const SIGNAL_RADII: [u32; 4] = [3, 5, 7, 9];
pub const EDGE_KERNEL_SIZE: usize = 25;
pub const LOCAL_MEAN_SIZE: usize = 15;
pub const STANDARD_BANK_ID: &str = "xaieval-bank/1:disk3-5-7-9,edge25h,edge25v,lap3";
pub const CHANNEL_NAMES: [&str; 7] = [
    "disk-r3",
    "disk-r5",
    "disk-r7",
    "disk-r9",
    "edge-horizontal",
    "edge-vertical",
    "laplacian",
];
pub const DEFAULT_WEIGHTS: [f64; 7] = [0.2, 1.0, 0.5, 0.2, 0.0, 0.0, 0.0];
/// Output of [`calibrate_threshold`] for the default head, bank and phantom
/// configuration with seed [`CALIBRATION_SEED`] over [`CALIBRATION_CASES`].
pub const DEFAULT_THRESHOLD: f64 = 1.293_333_990_722_894_7;
pub const CALIBRATION_SEED: u64 = 20_240_601;
pub const CALIBRATION_CASES: usize = 200;

/// Disk of radius `r` inside a circular support of radius `2r`, zero mean
/// over the support and unit norm.
fn disk_kernel(radius: u32) -> Kernel {
    let r = f64::from(radius);
    let half = 2 * radius as isize;
    let side = (2 * half + 1) as usize;
    let mut support = vec![false; side * side];
    let mut inside = vec![false; side * side];
    for i in -half..=half {
        for j in -half..=half {
            let d = libm::sqrt((i * i + j * j) as f64);
            let k = ((i + half) as usize) * side + (j + half) as usize;
            support[k] = d <= 2.0 * r;
            inside[k] = d <= r;
        }
    }
    let n_support = support.iter().filter(|&&s| s).count() as f64;
    let n_inside = inside.iter().filter(|&&s| s).count() as f64;
    let mean = n_inside / n_support;
    let hi = 1.0 - mean;
    let lo = -mean;
    let norm = libm::sqrt(n_inside * hi * hi + (n_support - n_inside) * lo * lo);
    let (hi, lo) = (hi / norm, lo / norm);
    let weights = support
        .iter()
        .zip(&inside)
        .map(|(&s, &i)| {
            if i {
                hi
            } else if s {
                lo
            } else {
                0.0
            }
        })
        .collect();
    Kernel::new(side, side, weights)
}

fn edge_kernel(size: usize, horizontal: bool) -> Kernel {
    let mid = size / 2;
    let weights = (0..size * size)
        .map(|k| {
            let (r, c) = (k / size, k % size);
            let along = if horizontal { r } else { c };
            match along.cmp(&mid) {
                core::cmp::Ordering::Less => 1.0,
                core::cmp::Ordering::Equal => 0.0,
                core::cmp::Ordering::Greater => -1.0,
            }
        })
        .collect();
    Kernel::new(size, size, weights).zero_mean_unit_norm()
}

fn laplacian_kernel() -> Kernel {
    Kernel::new(3, 3, vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]).zero_mean_unit_norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    id: String,
    kernels: Vec<Kernel>,
}

impl FilterBank {
    pub fn standard() -> Self {
        let mut kernels: Vec<Kernel> = SIGNAL_RADII.iter().map(|&r| disk_kernel(r)).collect();
        kernels.push(edge_kernel(EDGE_KERNEL_SIZE, true));
        kernels.push(edge_kernel(EDGE_KERNEL_SIZE, false));
        kernels.push(laplacian_kernel());
        Self {
            id: STANDARD_BANK_ID.into(),
            kernels,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Largest kernel side; inputs must be at least this large.
    pub fn max_side(&self) -> usize {
        self.kernels.iter().map(|k| k.rows().max(k.cols())).max().unwrap_or(1)
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self {
            weights: DEFAULT_WEIGHTS.to_vec(),
            bias: 0.0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl HeadWeights {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.weights.len() != channels {
            return Err(Error::Config(format!(
                "head has {} weights for {channels} channels",
                self.weights.len()
            )));
        }
        if !(self.weights.iter().all(|w| w.is_finite()) && self.bias.is_finite() && self.threshold.is_finite()) {
            return Err(Error::Config("head weights must be finite".into()));
        }
        Ok(())
    }
}

/// `K` feature maps sharing the input geometry, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureStack {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::Config(format!(
                "{} values for {channels} channels of {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite feature value".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
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

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Multiplies every feature by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Copy of the stack with channel `k` zeroed.
pub fn ablate_channel(stack: &FeatureStack, k: usize) -> Result<FeatureStack> {
    if k >= stack.channels {
        return Err(Error::BadChannel {
            channel: k,
            channels: stack.channels,
        });
    }
    let mut out = stack.clone();
    let n = stack.pixels();
    out.data[k * n..(k + 1) * n].iter_mut().for_each(|v| *v = 0.0);
    Ok(out)
}

pub fn feature_maps(bank: &FilterBank, img: &Image) -> Result<FeatureStack> {
    let (h, w) = img.dims();
    let required = bank.max_side().max(LOCAL_MEAN_SIZE);
    if h < required || w < required {
        return Err(Error::InputTooSmall {
            height: h,
            width: w,
            required,
        });
    }
    let src = img.to_f64();
    let mean = filter::box_mean(&src, w, h, LOCAL_MEAN_SIZE);
    let centred: Vec<f64> = src.iter().zip(&mean).map(|(v, m)| v - m).collect();
    let mut data = Vec::with_capacity(w * h * bank.len());
    for kernel in bank.kernels() {
        let resp = filter::correlate(&centred, w, h, kernel);
        data.extend(resp.iter().map(|&v| v.max(0.0) as f32));
    }
    FeatureStack::new(w, h, bank.len(), data)
}

/// `sum_k w_k F_k(p)` for every pixel.
pub fn decision_map(stack: &FeatureStack, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != stack.channels {
        return Err(Error::Config(format!(
            "{} weights for {} channels",
            weights.len(),
            stack.channels
        )));
    }
    let mut out = vec![0.0; stack.pixels()];
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(stack.channel(k)) {
            *o += w * f64::from(f);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub present: bool,
    #[serde(rename = "box")]
    pub bbox: Option<Roi>,
}

impl Prediction {
    pub fn absent(score: f64) -> Self {
        Self {
            score,
            present: false,
            bbox: None,
        }
    }
}

/// Detection from precomputed features.
pub fn predict_stack(stack: &FeatureStack, head: &HeadWeights, box_radius: u32) -> Result<Prediction> {
    let d = decision_map(stack, &head.weights)?;
    let i = argmax_first(d.iter().copied());
    let score = d[i] + head.bias;
    if score < head.threshold {
        return Ok(Prediction::absent(score));
    }
    let side = 2 * box_radius as usize + 1;
    let (h, w) = stack.dims();
    let bbox = Roi::centered((i / w, i % w), side.min(h), side.min(w), h, w)?;
    Ok(Prediction {
        score,
        present: true,
        bbox: Some(bbox),
    })
}

/// Normalized `max(0, decision map)`.
pub fn whitebox_attribution(stack: &FeatureStack, head: &HeadWeights) -> Result<Heatmap> {
    let mut d = decision_map(stack, &head.weights)?;
    d.iter_mut().for_each(|v| *v = v.max(0.0));
    grid::normalize_f64(stack.width, stack.height, &d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomizationMode {
    HeadNoise,
    HeadReinit,
    KernelNoise,
}

impl RandomizationMode {
    pub const ALL: [RandomizationMode; 3] = [
        RandomizationMode::HeadNoise,
        RandomizationMode::HeadReinit,
        RandomizationMode::KernelNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RandomizationMode::HeadNoise => "head-noise",
            RandomizationMode::HeadReinit => "head-reinit",
            RandomizationMode::KernelNoise => "kernel-noise",
        }
    }

    /// Whether only the head changes (features untouched).
    pub fn head_only(&self) -> bool {
        !matches!(self, RandomizationMode::KernelNoise)
    }
}

/// Perturbed copies of the head and bank. Bias and threshold are kept.
pub fn randomize_weights(
    bank: &FilterBank,
    head: &HeadWeights,
    mode: RandomizationMode,
    sigma: f64,
    seed: u64,
) -> Result<(HeadWeights, FilterBank)> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = seed::rng(seed, 0);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut out_head = head.clone();
    let mut out_bank = bank.clone();
    match mode {
        RandomizationMode::HeadNoise => {
            for w in &mut out_head.weights {
                *w += sigma * normal();
            }
        }
        RandomizationMode::HeadReinit => {
            for w in &mut out_head.weights {
                *w = sigma * normal();
            }
        }
        RandomizationMode::KernelNoise => {
            out_bank.kernels = bank
                .kernels
                .iter()
                .map(|k| {
                    let weights = k.weights().iter().map(|w| w + sigma * normal()).collect();
                    Kernel::new(k.rows(), k.cols(), weights).zero_mean_unit_norm()
                })
                .collect();
            out_bank.id = format!("{}+kernel-noise(sigma={sigma},seed={seed})", bank.id);
        }
    }
    Ok((out_head, out_bank))
}

/// The detector: bank, head and the half-size of the predicted box.
#[derive(Debug, Clone, PartialEq)]
pub struct RefModel {
    pub bank: FilterBank,
    pub head: HeadWeights,
    pub box_radius: u32,
}

impl Default for RefModel {
    fn default() -> Self {
        Self {
            bank: FilterBank::standard(),
            head: HeadWeights::default(),
            box_radius: 5,
        }
    }
}

impl RefModel {
    pub fn features(&self, img: &Image) -> Result<FeatureStack> {
        feature_maps(&self.bank, img)
    }

    pub fn predict(&self, img: &Image) -> Result<Prediction> {
        predict_stack(&self.features(img)?, &self.head, self.box_radius)
    }

    pub fn score(&self, img: &Image) -> Result<f64> {
        Ok(self.predict(img)?.score)
    }
}

/// Midpoint between the 95th percentile of background scores and the 5th
/// percentile of lesion scores over a seeded half-lesion phantom set.
pub fn calibrate_threshold(
    bank: &FilterBank,
    weights: &[f64],
    bias: f64,
    phantom_cfg: &PhantomConfig,
    n_cases: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = PhantomConfig {
        seed,
        ..phantom_cfg.clone()
    };
    let mut background = Vec::new();
    let mut lesion = Vec::new();
    for (i, has_lesion) in phantom::dataset_plan(n_cases, 0.5)?.into_iter().enumerate() {
        let case = phantom::generate_case(&cfg, has_lesion, i)?;
        let stack = feature_maps(bank, &case.image)?;
        let d = decision_map(&stack, weights)?;
        let score = d.iter().copied().fold(f64::NEG_INFINITY, f64::max) + bias;
        if has_lesion {
            lesion.push(score);
        } else {
            background.push(score);
        }
    }
    Ok(0.5 * (grid::quantile(&background, 0.95) + grid::quantile(&lesion, 0.05)))
}
