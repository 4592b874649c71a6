//! The demo's computations, kept free of JS types so they test natively.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use tenvoo::adapters::{adapter_for_kernel, AdapterKind};
use tenvoo::data::{generate_phantom, to_model_batch, DatasetTag, PhantomConfig};
use tenvoo::ddpm::{make_schedule, q_sample, ScheduleShape};
use tenvoo::tensor::DenseTensor;
use tenvoo::{Error, Result};

/// Schedule range used by the demo.
pub const BETA: (f64, f64) = (1e-4, 0.02);

/// Voxel values of a phantom in `[0, 1]`, shape `[size; 3]`.
pub fn phantom(tag: &str, size: usize, seed: u64) -> Result<DenseTensor> {
    let tag: DatasetTag = tag.parse()?;
    let mut cfg = PhantomConfig::new(tag, size);
    let r = (size as f64 / 8.0).max(1.0);
    cfg.lesion_radius = [r, 1.5 * r];
    Ok(generate_phantom(&cfg, seed)?.voxels)
}

/// Slice `z` of a `[D, H, W]` volume (leading singleton axes allowed).
pub fn axial(v: &DenseTensor, z: usize) -> Result<Vec<f64>> {
    let s = v.shape();
    let [d, h, w] = s[s.len() - 3..] else {
        unreachable!()
    };
    if z >= d {
        return Err(Error::OutOfRange(format!("slice {z} outside depth {d}")));
    }
    Ok(v.data()[z * h * w..(z + 1) * h * w].to_vec())
}

/// Maps `lo..hi` to gray levels as RGBA bytes.
pub fn to_rgba(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let g = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Slice `z` of the phantom after `t` forward steps of a `steps`-step linear schedule,
/// in model units (`[-1, 1]` at `t = 0`). `t = 0` returns the clean slice.
pub fn noised(
    tag: &str,
    size: usize,
    seed: u64,
    z: usize,
    t: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let x0 = to_model_batch(&[&phantom(tag, size, seed)?])?;
    if t == 0 {
        return axial(&x0, z);
    }
    let schedule = make_schedule(steps, BETA.0, BETA.1, ScheduleShape::Linear)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed);
    let eps = DenseTensor::randn(x0.shape(), 1.0, &mut rng);
    axial(&q_sample(&x0, t, &eps, &schedule)?, z)
}

pub fn alpha_bar(t: usize, steps: usize) -> Result<f64> {
    if t == 0 {
        return Ok(1.0);
    }
    make_schedule(steps, BETA.0, BETA.1, ScheduleShape::Linear)?.alpha_bar_at(t)
}

/// Trainable adapter size for one `k³` conv at ranks `1..=max_rank`.
pub fn param_curve(
    kind: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    max_rank: usize,
) -> Result<Vec<usize>> {
    let kind: AdapterKind = kind.parse()?;
    (1..=max_rank)
        .map(|r| Ok(adapter_for_kernel(kind, &[c_out, c_in, k, k, k], r, 0)?.param_count()))
        .collect()
}
