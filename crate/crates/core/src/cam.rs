//! Eigen CAM and Ablation CAM over any [`Model`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ProviderError, ProviderErrorKind};
use crate::grid::{self, Heatmap, Image};
use crate::provider::Model;
use crate::refmodel::FeatureStack;

/// Guard for the Ablation CAM weight denominator.
pub const ABLATION_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    Eigen,
    Ablation,
    /// The model's own attribution map; a reference, not a CAM.
    Whitebox,
}

impl CamMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CamMethod::Eigen => "eigen",
            CamMethod::Ablation => "ablation",
            CamMethod::Whitebox => "whitebox",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "eigen" => Ok(CamMethod::Eigen),
            "ablation" => Ok(CamMethod::Ablation),
            "whitebox" => Ok(CamMethod::Whitebox),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Eigenvector of the largest eigenvalue of a symmetric `k x k` matrix
/// (row-major), by cyclic Jacobi rotations. Ties go to the lowest index.
fn principal_eigenvector(mut a: Vec<f64>, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    for _sweep in 0..64 {
        let off: f64 = (0..k)
            .flat_map(|p| (0..k).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p * k + q] * a[p * k + q])
            .sum();
        let diag: f64 = (0..k).map(|p| a[p * k + p] * a[p * k + p]).sum();
        if off <= 1e-30 * diag || off == 0.0 {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for i in 0..k {
                    let (aip, aiq) = (a[i * k + p], a[i * k + q]);
                    a[i * k + p] = c * aip - s * aiq;
                    a[i * k + q] = s * aip + c * aiq;
                    let (vip, viq) = (v[i * k + p], v[i * k + q]);
                    v[i * k + p] = c * vip - s * viq;
                    v[i * k + q] = s * vip + c * viq;
                }
                for j in 0..k {
                    let (apj, aqj) = (a[p * k + j], a[q * k + j]);
                    a[p * k + j] = c * apj - s * aqj;
                    a[q * k + j] = s * apj + c * aqj;
                }
            }
        }
    }
    let best = grid::argmax_first((0..k).map(|i| a[i * k + i]));
    (0..k).map(|i| v[i * k + best]).collect()
}

/// First right singular vector of the column-centred pixel-by-channel matrix.
pub fn principal_direction(stack: &FeatureStack) -> Vec<f64> {
    let k = stack.channels();
    let n = stack.pixels() as f64;
    let means: Vec<f64> = (0..k)
        .map(|c| stack.channel(c).iter().map(|&x| f64::from(x)).sum::<f64>() / n)
        .collect();
    let mut gram = vec![0.0; k * k];
    for p in 0..k {
        for q in p..k {
            let (fp, fq) = (stack.channel(p), stack.channel(q));
            let s: f64 = fp
                .iter()
                .zip(fq)
                .map(|(&x, &y)| (f64::from(x) - means[p]) * (f64::from(y) - means[q]))
                .sum();
            gram[p * k + q] = s;
            gram[q * k + p] = s;
        }
    }
    principal_eigenvector(gram, k)
}

/// Projection of the (uncentred) features onto the principal direction,
/// sign-fixed to a non-negative sum, rectified and normalized.
pub fn eigen_cam(stack: &FeatureStack) -> Heatmap {
    let (w, h) = (stack.width(), stack.height());
    if stack.data().iter().all(|&x| x == 0.0) {
        return Heatmap::zeros(w, h);
    }
    let v = principal_direction(stack);
    let proj = weighted_sum(stack, &v);
    let sign = if proj.iter().sum::<f64>() >= 0.0 { 1.0 } else { -1.0 };
    let rectified: Vec<f64> = proj.iter().map(|&x| (sign * x).max(0.0)).collect();
    grid::normalize_f64(w, h, &rectified).expect("features are finite")
}

fn weighted_sum(stack: &FeatureStack, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; stack.pixels()];
    for (k, &wk) in weights.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(stack.channel(k)) {
            *o += wk * f64::from(f);
        }
    }
    out
}

/// Channel weights `(y - y_k) / max(|y|, eps)`.
pub fn ablation_weights(base: f64, ablated: &[f64]) -> Vec<f64> {
    let denom = libm::fabs(base).max(ABLATION_EPSILON);
    ablated.iter().map(|&yk| (base - yk) / denom).collect()
}

/// Ablation CAM from precomputed scores.
pub fn ablation_cam_from_scores(stack: &FeatureStack, base: f64, ablated: &[f64]) -> Result<Heatmap, Error> {
    if ablated.len() != stack.channels() {
        return Err(Error::Config(format!(
            "{} ablation scores for {} channels",
            ablated.len(),
            stack.channels()
        )));
    }
    let w = ablation_weights(base, ablated);
    let mut map = weighted_sum(stack, &w);
    map.iter_mut().for_each(|x| *x = x.max(0.0));
    grid::normalize_f64(stack.width(), stack.height(), &map)
}

/// Scores the image once as is and once per ablated channel.
pub fn ablation_cam(model: &mut dyn Model, img: &Image, stack: &FeatureStack) -> Result<Heatmap, ProviderError> {
    let base = model.predict(img)?.score;
    let mut ablated = Vec::with_capacity(stack.channels());
    for k in 0..stack.channels() {
        let p = model.ablate(img, k).map_err(|e| e.with_channel(k))?;
        ablated.push(p.score);
    }
    ablation_cam_from_scores(stack, base, &ablated)
        .map_err(|e| ProviderError::new(ProviderErrorKind::Protocol, format!("{e}")))
}

fn geometry_error(got: (usize, usize), img: &Image) -> ProviderError {
    ProviderError::new(
        ProviderErrorKind::Protocol,
        format!("model output geometry {got:?} differs from image {:?}", img.dims()),
    )
}

/// Heatmap of `method` for `img`.
pub fn explain(model: &mut dyn Model, method: CamMethod, img: &Image) -> Result<Heatmap, ProviderError> {
    let heatmap = match method {
        CamMethod::Eigen | CamMethod::Ablation => {
            let stack = model.features(img)?;
            if stack.dims() != img.dims() {
                return Err(geometry_error(stack.dims(), img));
            }
            if method == CamMethod::Eigen {
                eigen_cam(&stack)
            } else {
                ablation_cam(model, img, &stack)?
            }
        }
        CamMethod::Whitebox => grid::normalize_heatmap(&model.attribution(img)?)
            .map_err(|e| ProviderError::new(ProviderErrorKind::Protocol, format!("{e}")))?,
    };
    if heatmap.dims() != img.dims() {
        return Err(geometry_error(heatmap.dims(), img));
    }
    Ok(heatmap)
}
