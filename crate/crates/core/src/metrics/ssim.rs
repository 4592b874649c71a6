//! Multi-scale structural similarity for 3D volumes.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Reference 5-scale weights, of which the first three are used and renormalized.
const BASE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range `L`; `None` recomputes it from both volumes.
    #[serde(default)]
    pub data_range: Option<f64>,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            window: 7,
            sigma: 1.5,
            data_range: None,
        }
    }
}

impl MsSsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > BASE_WEIGHTS.len() {
            return Err(Error::InvalidConfig(format!(
                "ms-ssim scales must be in 1..={}, got {}",
                BASE_WEIGHTS.len(),
                self.scales
            )));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "ms-ssim window must be odd, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(
                "ms-ssim sigma must be positive".into(),
            ));
        }
        if let Some(l) = self.data_range {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(
                    "ms-ssim data range must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        let w = &BASE_WEIGHTS[..self.scales];
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    /// Smallest axis length the pyramid of windows fits in.
    pub fn min_extent(&self) -> usize {
        self.window << (self.scales - 1)
    }
}

/// A volume viewed as `[D, H, W]`; leading singleton axes are dropped.
fn as_volume(t: &DenseTensor) -> Result<[usize; 3]> {
    let s = t.shape();
    if s.len() < 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!(
            "expected a [D, H, W] volume, got {s:?}"
        )));
    }
    Ok([s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]])
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let g: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Valid-mode filtering along one axis.
fn filter_axis(v: &[f64], dims: [usize; 3], axis: usize, k: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - k.len();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                let base = z * strides[0] + y * strides[1] + x * strides[2];
                out.push(
                    k.iter()
                        .enumerate()
                        .map(|(i, w)| w * v[base + i * strides[axis]])
                        .sum(),
                );
            }
        }
    }
    (out, out_dims)
}

fn blur(v: &[f64], dims: [usize; 3], k: &[f64]) -> Vec<f64> {
    let (a, d) = filter_axis(v, dims, 0, k);
    let (b, d) = filter_axis(&a, d, 1, k);
    filter_axis(&b, d, 2, k).0
}

/// 2×2×2 mean pooling, dropping a trailing odd slice.
fn downsample(v: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let out = dims.map(|d| d / 2);
    let mut res = Vec::with_capacity(out.iter().product());
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                let mut s = 0.0;
                for (a, b, c) in cube_offsets() {
                    s += v[((2 * z + a) * dims[1] + 2 * y + b) * dims[2] + 2 * x + c];
                }
                res.push(s / 8.0);
            }
        }
    }
    (res, out)
}

fn cube_offsets() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..8).map(|i| (i >> 2, (i >> 1) & 1, i & 1))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(a: &[f64], b: &[f64], dims: [usize; 3], k: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let mu_a = blur(a, dims, k);
    let mu_b = blur(b, dims, k);
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let e_aa = blur(&sq(a, a), dims, k);
    let e_bb = blur(&sq(b, b), dims, k);
    let e_ab = blur(&sq(a, b), dims, k);
    let mut lum = Vec::with_capacity(mu_a.len());
    let mut cs = Vec::with_capacity(mu_a.len());
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        lum.push((2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1));
        cs.push((2.0 * cov + c2) / (va + vb + c2));
    }
    let lcs: Vec<f64> = lum.iter().zip(&cs).map(|(l, c)| l * c).collect();
    (mean(&lcs), mean(&cs))
}

/// `max(x, 0)^w`; fractional powers of negative terms are undefined, and
/// anti-correlated structure at any scale should not be rescued by a second
/// sign flip elsewhere.
fn clamped_pow(x: f64, w: f64) -> f64 {
    x.max(0.0).powf(w)
}

/// MS-SSIM between two equally shaped volumes.
///
/// Contrast-structure terms from every scale but the coarsest, times the full
/// SSIM at the coarsest, each clamped at zero and raised to its renormalized
/// weight. The result lies in `[0, 1]`.
pub fn ms_ssim_3d(a: &DenseTensor, b: &DenseTensor, cfg: &MsSsimConfig) -> Result<f64> {
    cfg.validate()?;
    let dims = as_volume(a)?;
    if as_volume(b)? != dims {
        return Err(Error::shape(format!(
            "ms-ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let need = cfg.min_extent();
    if dims.iter().any(|&d| d < need) {
        return Err(Error::shape(format!(
            "volume {dims:?} too small for {} scales with window {} (need {need} per axis)",
            cfg.scales, cfg.window
        )));
    }
    let l = cfg.data_range.unwrap_or_else(|| {
        let (lo, hi) = a
            .data()
            .iter()
            .chain(b.data())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    });
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let k = gaussian(cfg.window, cfg.sigma);
    let weights = cfg.weights();
    let (mut va, mut vb, mut d) = (a.data().to_vec(), b.data().to_vec(), dims);
    let mut out = 1.0;
    for (j, w) in weights.iter().enumerate() {
        let (lcs, cs) = ssim_terms(&va, &vb, d, &k, c1, c2);
        if j + 1 == weights.len() {
            out *= clamped_pow(lcs, *w);
        } else {
            out *= clamped_pow(cs, *w);
            (va, _) = downsample(&va, d);
            (vb, d) = downsample(&vb, d);
        }
    }
    Ok(out)
}
