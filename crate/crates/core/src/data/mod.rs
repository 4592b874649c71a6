//! Synthetic brain-like phantoms and the `TVOOVOL1` volume container.
//!
//! Every random draw comes from one `Xoshiro256PlusPlus` stream seeded with
//! `seed_from_u64(seed)` (SplitMix64 expansion), consumed in a fixed order:
//! per-volume jitter, deformation field, lesions, then voxel noise in
//! row-major order. Voxels are rounded to f32 at the end so a volume survives
//! the file format unchanged.

mod io;

pub use io::{decode_volume, encode_volume, read_volume, write_volume, VolumeHeader, VOLUME_MAGIC};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Name of the only supported generator, recorded in configs.
pub const PRNG_NAME: &str = "xoshiro256++";

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema,
)]
pub enum DatasetTag {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "shiftA")]
    ShiftA,
    #[serde(rename = "shiftB")]
    ShiftB,
    #[serde(rename = "lesion")]
    Lesion,
}

impl DatasetTag {
    pub const ALL: [DatasetTag; 4] = [Self::Pretrain, Self::ShiftA, Self::ShiftB, Self::Lesion];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::ShiftA => "shiftA",
            Self::ShiftB => "shiftB",
            Self::Lesion => "lesion",
        }
    }

    /// Band intensities from the outermost shell inwards, all below 0.9.
    fn levels(&self, n: usize) -> Vec<f64> {
        let frac = |j: usize| {
            if n > 1 {
                j as f64 / (n - 1) as f64
            } else {
                0.0
            }
        };
        (0..n)
            .map(|j| match self {
                Self::Pretrain | Self::Lesion => 0.3 + 0.45 * frac(j),
                Self::ShiftA => 0.75 - 0.45 * frac(j),
                Self::ShiftB => {
                    if j % 2 == 0 {
                        0.25
                    } else {
                        0.7
                    }
                }
            })
            .collect()
    }

    /// Multipliers on deformation amplitude and spatial frequency.
    fn deformation(&self) -> (f64, f64) {
        match self {
            Self::Pretrain | Self::Lesion => (1.0, 1.0),
            Self::ShiftA => (1.5, 1.0),
            Self::ShiftB => (1.0, 2.0),
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown dataset tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub tag: DatasetTag,
    /// `[D, H, W]`.
    pub grid: [usize; 3],
    pub n_shells: usize,
    /// Relative radial deformation; 0 gives exact ellipsoids.
    pub amplitude: f64,
    /// Hyperintense spheres; only used by the `lesion` tag.
    #[serde(default)]
    pub lesion_count: usize,
    /// Lesion radius range in voxels.
    #[serde(default = "default_lesion_radius")]
    pub lesion_radius: [f64; 2],
    pub noise_sigma: f64,
    #[serde(default = "default_rng")]
    pub rng: String,
}

fn default_lesion_radius() -> [f64; 2] {
    [1.5, 3.0]
}

fn default_rng() -> String {
    PRNG_NAME.to_string()
}

impl PhantomConfig {
    /// Desk-scale defaults for `tag` on a cubic grid.
    pub fn new(tag: DatasetTag, size: usize) -> Self {
        Self {
            tag,
            grid: [size; 3],
            n_shells: 4,
            amplitude: 0.08,
            lesion_count: usize::from(tag == DatasetTag::Lesion),
            lesion_radius: default_lesion_radius(),
            noise_sigma: 0.02,
            rng: default_rng(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.grid.iter().any(|&d| d < 4) {
            return bad(format!(
                "phantom grid {:?} must be at least 4 per axis",
                self.grid
            ));
        }
        if self.n_shells == 0 {
            return bad("phantom n_shells must be at least 1".into());
        }
        if !(self.amplitude >= 0.0 && self.amplitude <= 0.5) {
            return bad(format!(
                "phantom amplitude {} must be in [0, 0.5]",
                self.amplitude
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "phantom noise_sigma {} must be >= 0",
                self.noise_sigma
            ));
        }
        let [lo, hi] = self.lesion_radius;
        if !(lo >= 0.5 && lo <= hi) {
            return bad(format!(
                "lesion radius range {:?} must satisfy 0.5 <= lo <= hi",
                self.lesion_radius
            ));
        }
        let min_dim = *self.grid.iter().min().unwrap_or(&0) as f64;
        if self.lesion_count > 0 && 2.0 * hi.ceil() + 3.0 > min_dim {
            return bad(format!(
                "lesion radius {hi} does not fit inside grid {:?}",
                self.grid
            ));
        }
        if self.lesion_count > 0 && self.tag != DatasetTag::Lesion {
            return bad(format!(
                "lesion_count is only valid for the lesion tag, not {}",
                self.tag
            ));
        }
        if self.rng != PRNG_NAME {
            return bad(format!(
                "unsupported rng {:?}; only {PRNG_NAME} is available",
                self.rng
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    /// `[D, H, W]` in `[0, 1]`.
    pub voxels: DenseTensor,
    pub tag: DatasetTag,
    pub seed: u64,
}

/// Low-frequency radial perturbation `Σ_k c_k sin(f_k · u + φ_k)`.
struct Deformation {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Deformation {
    fn draw<R: Rng>(rng: &mut R, freq_scale: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let f = [0, 1, 2].map(|_| freq_scale * PI * rng.gen_range(0.5..2.0));
                (f, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, u: [f64; 3]) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.2).sum();
        self.waves
            .iter()
            .map(|(f, phase, c)| c * (f[0] * u[0] + f[1] * u[1] + f[2] * u[2] + phase).sin())
            .sum::<f64>()
            / total
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Centered coordinate in `[-1, 1]`; exactly antisymmetric under `i -> n-1-i`.
fn centered(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64
}

/// Nested deformed ellipsoid shells; see the module docs for the draw order.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<VolumeRecord> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let [d, h, w] = cfg.grid;

    let axes = [0.78, 0.88, 0.72].map(|a: f64| a * rng.gen_range(0.95..1.05));
    let levels: Vec<f64> = cfg
        .tag
        .levels(cfg.n_shells)
        .into_iter()
        .map(|l| l + rng.gen_range(-0.03..0.03))
        .collect();
    let (amp_scale, freq_scale) = cfg.tag.deformation();
    let field = Deformation::draw(&mut rng, freq_scale);
    let amplitude = cfg.amplitude * amp_scale;
    // boundary j sits at radius 1 - j/n and raises intensity to levels[j]
    let width = 0.25 / (cfg.n_shells as f64 * 4.0);

    let mut voxels = DenseTensor::from_fn(&cfg.grid, |i| {
        let u = [centered(i[0], d), centered(i[1], h), centered(i[2], w)];
        let rho =
            ((u[0] / axes[0]).powi(2) + (u[1] / axes[1]).powi(2) + (u[2] / axes[2]).powi(2)).sqrt();
        let rho = if amplitude > 0.0 {
            rho * (1.0 + amplitude * field.at(u))
        } else {
            rho
        };
        let mut v = 0.0;
        let mut prev = 0.0;
        for (j, level) in levels.iter().enumerate() {
            let b = 1.0 - j as f64 / cfg.n_shells as f64;
            v += (level - prev) * sigmoid((b - rho) / width);
            prev = *level;
        }
        v
    });

    if cfg.tag == DatasetTag::Lesion {
        let [lo, hi] = cfg.lesion_radius;
        for _ in 0..cfg.lesion_count {
            let r = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let margin = r.ceil() as usize + 1;
            let c = [d, h, w].map(|n| {
                // keep centers in the inner half of the head
                let lo = margin.max(n / 4);
                let hi = (n - 1 - margin).min(n - 1 - n / 4).max(lo);
                rng.gen_range(lo..=hi)
            });
            for z in c[0] - margin..=c[0] + margin {
                for y in c[1] - margin..=c[1] + margin {
                    for x in c[2] - margin..=c[2] + margin {
                        let dist2 = [z, y, x]
                            .iter()
                            .zip(&c)
                            .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                            .sum::<f64>();
                        if dist2 <= r * r {
                            voxels.set(&[z, y, x], 1.0);
                        }
                    }
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        for v in voxels.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += cfg.noise_sigma * n;
        }
    }
    for v in voxels.data_mut() {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }
    Ok(VolumeRecord {
        voxels,
        tag: cfg.tag,
        seed,
    })
}

/// Deterministic shuffled split; `round(fraction · n)` records go to training.
pub fn make_split<T>(records: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if records.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot split an empty record list".into(),
        ));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction {fraction} must be in (0, 1)"
        )));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    let n_train = ((n as f64 * fraction).round() as usize).min(n);
    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter()
            .map(|&i| slots[i].take().expect("index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let eval = take(&order[n_train..]);
    Ok((train, eval))
}

/// Stacks `[D, H, W]` volumes into `[n, 1, D, H, W]` scaled from `[0, 1]` to `[-1, 1]`.
pub fn to_model_batch(volumes: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let dims = first.shape().to_vec();
    if dims.len() != 3 {
        return Err(Error::shape(format!(
            "expected [D, H, W] volumes, got {dims:?}"
        )));
    }
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.shape() != dims.as_slice() {
            return Err(Error::shape(format!(
                "volume {:?} does not match {dims:?}",
                v.shape()
            )));
        }
        data.extend(v.data().iter().map(|x| 2.0 * x - 1.0));
    }
    DenseTensor::new(vec![volumes.len(), 1, dims[0], dims[1], dims[2]], data)
}

/// Inverse of [`to_model_batch`] for one sample, clamped to `[0, 1]`.
pub fn from_model_sample(x: &DenseTensor) -> Result<DenseTensor> {
    let s = x.shape();
    if s.len() < 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!(
            "expected one [D, H, W] sample, got {s:?}"
        )));
    }
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
        .reshape(&s[s.len() - 3..])
}
