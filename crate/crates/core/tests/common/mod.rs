//! Brute-force oracles shared by the integration tests.

#![allow(dead_code)]

use xaieval_core::grid::{Image, Roi};
use xaieval_core::phantom::{self, PhantomConfig};
use xaieval_core::refmodel::{FilterBank, LOCAL_MEAN_SIZE};

/// Half-sample symmetric mirror index.
pub fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Same-size correlation, one multiply per tap.
pub fn dense_correlate(src: &[f64], w: usize, h: usize, k: &[f64], kr: usize, kc: usize) -> Vec<f64> {
    let (hr, hc) = ((kr / 2) as isize, (kc / 2) as isize);
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..kr {
                for j in 0..kc {
                    let sr = mirror(r as isize + i as isize - hr, h);
                    let sc = mirror(c as isize + j as isize - hc, w);
                    acc += k[i * kc + j] * src[sr * w + sc];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Feature maps of the standard bank computed tap by tap.
pub fn dense_features(img: &Image) -> Vec<Vec<f64>> {
    let (h, w) = img.dims();
    let src: Vec<f64> = img.pixels().iter().map(|&v| f64::from(v)).collect();
    let n = LOCAL_MEAN_SIZE;
    let boxcar = vec![1.0 / (n * n) as f64; n * n];
    let mean = dense_correlate(&src, w, h, &boxcar, n, n);
    let centred: Vec<f64> = src.iter().zip(&mean).map(|(v, m)| v - m).collect();
    FilterBank::standard()
        .kernels()
        .iter()
        .map(|k| {
            dense_correlate(&centred, w, h, k.weights(), k.rows(), k.cols())
                .into_iter()
                .map(|v| v.max(0.0))
                .collect()
        })
        .collect()
}

pub fn weighted(features: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; features[0].len()];
    for (f, &wk) in features.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += wk * v;
        }
    }
    out
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// A noiseless lesion phantom: the composite of case `index`.
pub fn clean_lesion(seed: u64, index: usize) -> (Image, Roi, (usize, usize)) {
    let cfg = PhantomConfig {
        seed,
        ..PhantomConfig::default()
    };
    let comp = phantom::noiseless_composite(&cfg, true, index).unwrap();
    let truth = comp.truth.unwrap();
    let img = Image::new(cfg.width, cfg.height, comp.pixels.iter().map(|&v| v as f32).collect()).unwrap();
    (img, truth.bbox, truth.center)
}

/// A flat image with one raised-cosine disk.
pub fn disk_image(n: usize, center: (f64, f64), radius: f64) -> Image {
    let pixels = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64, (i % n) as f64);
            let d = ((r - center.0).powi(2) + (c - center.1).powi(2)).sqrt();
            (0.5 + 0.25 * phantom::lesion_profile(d, radius, 1.5)) as f32
        })
        .collect();
    Image::new(n, n, pixels).unwrap()
}
