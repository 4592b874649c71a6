//! Kernel MMD between sets of volumes, on features from a fixed random encoder.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv3d, ConvGeometry};
use crate::tensor::DenseTensor;

/// Channel widths of the three encoder layers; the last is the feature size.
pub const ENCODER_WIDTHS: [usize; 3] = [16, 32, 64];

/// Three stride-2 random convolutions with ReLU, then global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEncoder {
    kernels: Vec<DenseTensor>,
}

impl RandomEncoder {
    /// He-scaled Gaussian kernels drawn from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut c_in = 1;
        let kernels = ENCODER_WIDTHS
            .iter()
            .map(|&c_out| {
                let fan_in = (c_in * 27) as f64;
                let k =
                    DenseTensor::randn(&[c_out, c_in, 3, 3, 3], (2.0 / fan_in).sqrt(), &mut rng);
                c_in = c_out;
                k
            })
            .collect();
        Self { kernels }
    }

    pub fn feature_dim(&self) -> usize {
        ENCODER_WIDTHS[ENCODER_WIDTHS.len() - 1]
    }

    /// Feature vector of one `[D, H, W]` volume.
    pub fn encode(&self, volume: &DenseTensor) -> Result<Vec<f64>> {
        let s = volume.shape();
        if s.len() < 3 {
            return Err(Error::shape(format!("expected a volume, got {s:?}")));
        }
        let mut x = volume.reshape(&[1, 1, s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]])?;
        let geom = ConvGeometry::strided(2, 1);
        for k in &self.kernels {
            x = conv3d(&x, k, None, &geom)?.map(|v| v.max(0.0));
        }
        let c = x.shape()[1];
        let per = x.len() / c;
        Ok(x.data()
            .chunks(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased MMD²; `None` unless both sets have at least two members.
    pub unbiased: Option<f64>,
    /// Biased (V-statistic) MMD², never negative up to round-off.
    pub biased: f64,
    /// RBF bandwidth used.
    pub bandwidth: f64,
}

impl MmdEstimate {
    /// The unbiased value clamped at zero, or the biased one when it is undefined.
    pub fn reported(&self) -> f64 {
        self.unbiased.map_or(self.biased, |u| u.max(0.0))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median of the pairwise distances over the pooled sample; 1 if it is zero.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Block sums of the RBF Gram matrix: total and diagonal.
fn gram_sums(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> (f64, f64) {
    let mut total = 0.0;
    let mut diag = 0.0;
    for (i, u) in a.iter().enumerate() {
        for (j, v) in b.iter().enumerate() {
            let k = (-gamma * sq_dist(u, v)).exp();
            total += k;
            if i == j {
                diag += k;
            }
        }
    }
    (total, diag)
}

/// MMD² with the RBF kernel `exp(-|x - y|² / (2h²))`.
pub fn mmd_features(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<MmdEstimate> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidConfig("mmd needs two non-empty sets".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "mmd bandwidth {bandwidth} must be positive"
        )));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let (m, n) = (x.len() as f64, y.len() as f64);
    let (kxx, dxx) = gram_sums(x, x, gamma);
    let (kyy, dyy) = gram_sums(y, y, gamma);
    let (kxy, _) = gram_sums(x, y, gamma);
    let biased = kxx / (m * m) + kyy / (n * n) - 2.0 * kxy / (m * n);
    let unbiased = (x.len() > 1 && y.len() > 1).then(|| {
        (kxx - dxx) / (m * (m - 1.0)) + (kyy - dyy) / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
    });
    Ok(MmdEstimate {
        unbiased,
        biased,
        bandwidth,
    })
}

/// Encodes both sets with `RandomEncoder::new(encoder_seed)` and compares them
/// at the median-distance bandwidth.
pub fn mmd(a: &[DenseTensor], b: &[DenseTensor], encoder_seed: u64) -> Result<MmdEstimate> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidConfig("mmd needs two non-empty sets".into()));
    }
    let enc = RandomEncoder::new(encoder_seed);
    let fa = super::map_volumes(a, |v| enc.encode(v))?;
    let fb = super::map_volumes(b, |v| enc.encode(v))?;
    mmd_features(&fa, &fb, median_bandwidth(&fa, &fb))
}
