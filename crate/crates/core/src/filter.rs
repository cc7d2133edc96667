//! Same-size 2-D filtering with mirror (half-sample symmetric) padding.
//!
//! Correlation walks each kernel row as a list of constant-valued runs and
//! evaluates a run with one difference of row prefix sums. The standard
//! matched filters are piecewise constant along rows, so this costs a few
//! operations per kernel row; arbitrary kernels degrade gracefully to one run
//! per non-zero tap.

use alloc::vec;
use alloc::vec::Vec;

/// Mirror index into `[0, n)` with the edge sample repeated
/// (`... c b a | a b c ... x y z | z y x ...`). Works for any offset.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Run {
    row: usize,
    start: usize,
    len: usize,
    weight: f64,
}

/// A dense odd-sized correlation kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    runs: Vec<Run>,
}

impl Kernel {
    /// Panics on even or mismatched dimensions; kernels are code-defined.
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Self {
        assert!(rows % 2 == 1 && cols % 2 == 1, "kernel sides must be odd");
        assert_eq!(weights.len(), rows * cols);
        let runs = runs_of(rows, cols, &weights);
        Self {
            rows,
            cols,
            weights,
            runs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.weights.iter().map(|w| w * w).sum())
    }

    /// Shift to zero mean over all taps and scale to unit L2 norm.
    pub fn zero_mean_unit_norm(mut self) -> Self {
        let mean = self.sum() / self.weights.len() as f64;
        for w in &mut self.weights {
            *w -= mean;
        }
        let norm = self.l2_norm();
        if norm > 0.0 {
            for w in &mut self.weights {
                *w /= norm;
            }
        }
        Self::new(self.rows, self.cols, self.weights)
    }
}

fn runs_of(rows: usize, cols: usize, weights: &[f64]) -> Vec<Run> {
    let mut runs = Vec::new();
    for r in 0..rows {
        let row = &weights[r * cols..(r + 1) * cols];
        let mut c = 0;
        while c < cols {
            let w = row[c];
            let mut end = c + 1;
            while end < cols && row[end] == w {
                end += 1;
            }
            if w != 0.0 {
                runs.push(Run {
                    row: r,
                    start: c,
                    len: end - c,
                    weight: w,
                });
            }
            c = end;
        }
    }
    runs
}

/// Mirror-padded copy of `src` with `pad_r` rows and `pad_c` columns on every
/// side.
fn pad(src: &[f64], width: usize, height: usize, pad_r: usize, pad_c: usize) -> (Vec<f64>, usize) {
    let pw = width + 2 * pad_c;
    let ph = height + 2 * pad_r;
    let mut out = vec![0.0; pw * ph];
    for pr in 0..ph {
        let sr = reflect(pr as isize - pad_r as isize, height);
        let srow = &src[sr * width..(sr + 1) * width];
        let drow = &mut out[pr * pw..(pr + 1) * pw];
        for (pc, d) in drow.iter_mut().enumerate() {
            *d = srow[reflect(pc as isize - pad_c as isize, width)];
        }
    }
    (out, pw)
}

/// Same-size correlation `out(p) = sum_q k(q) * src(p + q)` with mirror
/// padding.
pub fn correlate(src: &[f64], width: usize, height: usize, kernel: &Kernel) -> Vec<f64> {
    let (pr, pc) = (kernel.rows / 2, kernel.cols / 2);
    let (padded, pw) = pad(src, width, height, pr, pc);
    let ph = height + 2 * pr;
    // prefix[r][c] = sum of padded[r][0..c]
    let stride = pw + 1;
    let mut prefix = vec![0.0; ph * stride];
    for r in 0..ph {
        let row = &padded[r * pw..(r + 1) * pw];
        let pre = &mut prefix[r * stride..(r + 1) * stride];
        let mut acc = 0.0;
        for (c, v) in row.iter().enumerate() {
            acc += v;
            pre[c + 1] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for run in &kernel.runs {
        let w = run.weight;
        for r in 0..height {
            let pre = &prefix[(r + run.row) * stride..(r + run.row + 1) * stride];
            let lo = &pre[run.start..run.start + width];
            let hi = &pre[run.start + run.len..run.start + run.len + width];
            let dst = &mut out[r * width..(r + 1) * width];
            for ((d, h), l) in dst.iter_mut().zip(hi).zip(lo) {
                *d += w * (h - l);
            }
        }
    }
    out
}

/// Separable same-size correlation with a symmetric 1-D kernel along rows
/// and then columns.
pub fn separable(src: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; width * height];
    for r in 0..height {
        let row = &src[r * width..(r + 1) * width];
        for c in 0..width {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[reflect(c as isize + k as isize - half, width)];
            }
            tmp[r * width + c] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for r in 0..height {
        for (k, t) in taps.iter().enumerate() {
            let sr = reflect(r as isize + k as isize - half, height);
            let srow = &tmp[sr * width..(sr + 1) * width];
            let drow = &mut out[r * width..(r + 1) * width];
            for (d, s) in drow.iter_mut().zip(srow) {
                *d += t * s;
            }
        }
    }
    out
}

/// Local mean over a `size x size` boxcar.
pub fn box_mean(src: &[f64], width: usize, height: usize, size: usize) -> Vec<f64> {
    let taps = vec![1.0 / size as f64; size];
    separable(src, width, height, &taps)
}

/// Normalized 1-D Gaussian taps truncated at `truncate` standard deviations.
pub fn gaussian_taps(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = libm::ceil(truncate * sigma) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| libm::exp(-((x * x) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Gaussian blur, kernel truncated at 4 sigma.
pub fn gaussian_blur(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    separable(src, width, height, &gaussian_taps(sigma, 4.0))
}
