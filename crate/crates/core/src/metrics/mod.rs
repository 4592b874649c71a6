//! Evaluation metrics for sets of volumes: MS-SSIM, kernel MMD and MSE.
//!
//! MMD runs on features from a fixed seeded random encoder, so values are
//! only comparable within one encoder seed.

mod mmd;
mod ssim;

pub use mmd::{median_bandwidth, mmd, mmd_features, MmdEstimate, RandomEncoder, ENCODER_WIDTHS};
pub use ssim::{ms_ssim_3d, MsSsimConfig};

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Default number of sampled pairs for large sets.
pub const MAX_PAIRS: usize = 100;

#[cfg(feature = "parallel")]
pub(crate) fn map_volumes<T: Send>(
    items: &[DenseTensor],
    f: impl Fn(&DenseTensor) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_volumes<T: Send>(
    items: &[DenseTensor],
    f: impl Fn(&DenseTensor) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
fn map_pairs(
    pairs: &[(usize, usize)],
    f: impl Fn(usize, usize) -> Result<f64> + Sync + Send,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    pairs.par_iter().map(|&(i, j)| f(i, j)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_pairs(
    pairs: &[(usize, usize)],
    f: impl Fn(usize, usize) -> Result<f64> + Sync + Send,
) -> Result<Vec<f64>> {
    pairs.iter().map(|&(i, j)| f(i, j)).collect()
}

/// Unordered pairs `i < j` of an `n`-set, or `max_pairs` of them drawn
/// without replacement from `seed` when there are more.
pub fn pair_indices(n: usize, max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    if all.len() <= max_pairs {
        return all;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), max_pairs).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|k| all[k]).collect()
}

/// Mean MS-SSIM over unordered pairs within one set.
pub fn pairwise_ms_ssim(
    set: &[DenseTensor],
    cfg: &MsSsimConfig,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "pairwise ms-ssim needs at least 2 volumes, got {}",
            set.len()
        )));
    }
    let pairs = pair_indices(set.len(), max_pairs, seed);
    let v = map_pairs(&pairs, |i, j| ms_ssim_3d(&set[i], &set[j], cfg))?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean over `generated` of the best MS-SSIM against any `real` volume.
pub fn nearest_real_ms_ssim(
    generated: &[DenseTensor],
    real: &[DenseTensor],
    cfg: &MsSsimConfig,
) -> Result<f64> {
    nearest(
        generated,
        real,
        |g, r| ms_ssim_3d(g, r, cfg),
        f64::max,
        f64::NEG_INFINITY,
    )
}

fn squeezed(t: &DenseTensor) -> Vec<usize> {
    t.shape().iter().copied().filter(|&d| d != 1).collect()
}

pub fn mse(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if squeezed(a) != squeezed(b) {
        return Err(Error::shape(format!(
            "mse shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

/// Mean over `generated` of the smallest MSE to any `real` volume.
pub fn nearest_real_mse(generated: &[DenseTensor], real: &[DenseTensor]) -> Result<f64> {
    nearest(generated, real, mse, f64::min, f64::INFINITY)
}

fn nearest(
    generated: &[DenseTensor],
    real: &[DenseTensor],
    score: impl Fn(&DenseTensor, &DenseTensor) -> Result<f64> + Sync + Send,
    pick: fn(f64, f64) -> f64,
    start: f64,
) -> Result<f64> {
    if generated.is_empty() || real.is_empty() {
        return Err(Error::InvalidConfig(
            "nearest-real metrics need two non-empty sets".into(),
        ));
    }
    let best = map_volumes(generated, |g| {
        real.iter()
            .try_fold(start, |acc, r| Ok(pick(acc, score(g, r)?)))
    })?;
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SsimProtocol {
    /// Mean over pairs of generated volumes.
    Pairwise,
    /// Mean best match of each generated volume among the real ones.
    NearestReal,
}

impl SsimProtocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pairwise => "pairwise",
            Self::NearestReal => "nearest-real",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub protocol: SsimProtocol,
    pub ms_ssim: MsSsimConfig,
    pub encoder_seed: u64,
    pub max_pairs: usize,
    pub pair_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: SsimProtocol::Pairwise,
            ms_ssim: MsSsimConfig::default(),
            encoder_seed: 0,
            max_pairs: MAX_PAIRS,
            pair_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MetricReport {
    pub ms_ssim: f64,
    pub ms_ssim_protocol: SsimProtocol,
    /// Unbiased MMD² clamped at zero.
    pub mmd: f64,
    /// Unbiased MMD² before clamping, when defined.
    pub mmd_raw: Option<f64>,
    pub mmd_biased: f64,
    pub mmd_bandwidth: f64,
    /// Mean nearest-real MSE of the generated volumes.
    pub mse: f64,
    pub n_samples: usize,
    pub n_real: usize,
}

/// All metrics of `generated` against `real`.
pub fn evaluate(
    real: &[DenseTensor],
    generated: &[DenseTensor],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::InvalidConfig(
            "evaluation needs non-empty real and generated sets".into(),
        ));
    }
    let shape = squeezed(&real[0]);
    if let Some(bad) = real.iter().chain(generated).find(|v| squeezed(v) != shape) {
        return Err(Error::shape(format!(
            "volume {:?} does not match {:?}",
            bad.shape(),
            real[0].shape()
        )));
    }
    let ms_ssim = match opts.protocol {
        SsimProtocol::Pairwise => {
            pairwise_ms_ssim(generated, &opts.ms_ssim, opts.max_pairs, opts.pair_seed)?
        }
        SsimProtocol::NearestReal => nearest_real_ms_ssim(generated, real, &opts.ms_ssim)?,
    };
    let est = mmd(generated, real, opts.encoder_seed)?;
    Ok(MetricReport {
        ms_ssim,
        ms_ssim_protocol: opts.protocol,
        mmd: est.reported(),
        mmd_raw: est.unbiased,
        mmd_biased: est.biased,
        mmd_bandwidth: est.bandwidth,
        mse: nearest_real_mse(generated, real)?,
        n_samples: generated.len(),
        n_real: real.len(),
    })
}
