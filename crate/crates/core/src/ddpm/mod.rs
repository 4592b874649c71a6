//! Linear-schedule DDPM: forward corruption, ancestral sampling and the
//! noise-prediction objective.

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, Optimizer, Parameterized};
use crate::error::{Error, Result};
use crate::nn::UNetLite;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
}

/// Per-step arrays indexed by `t - 1` for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    shape: ScheduleShape,
) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "diffusion needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let ScheduleShape::Linear = shape;
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange(format!(
                "time step {t} not in [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`.
pub fn q_sample(
    x0: &DenseTensor,
    t: usize,
    eps: &DenseTensor,
    schedule: &DiffusionSchedule,
) -> Result<DenseTensor> {
    let ab = schedule.alpha_bar[schedule.index(t)?];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One reverse step `x_{t-1} = μ_θ(x_t, t) + σ_t z`; `z` is ignored at `t = 1`.
pub fn p_step(
    x_t: &DenseTensor,
    t: usize,
    eps_pred: &DenseTensor,
    schedule: &DiffusionSchedule,
    z: &DenseTensor,
) -> Result<DenseTensor> {
    let i = schedule.index(t)?;
    let (alpha, beta, ab) = (schedule.alpha[i], schedule.beta[i], schedule.alpha_bar[i]);
    let c = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mean = x_t.zip_map(eps_pred, |x, e| inv * (x - c * e))?;
    if t == 1 {
        return Ok(mean);
    }
    let s = schedule.sigma[i];
    mean.zip_map(z, |m, n| m + s * n)
}

/// Anything that predicts noise from `(x_t, t - 1)`.
pub trait Denoiser {
    fn predict_noise(&self, x: &DenseTensor, t: &[usize]) -> Result<DenseTensor>;
}

impl Denoiser for UNetLite {
    fn predict_noise(&self, x: &DenseTensor, t: &[usize]) -> Result<DenseTensor> {
        self.predict(x, t)
    }
}

/// A denoiser that records its prediction in a graph for training.
pub trait NoiseModel: Parameterized {
    fn forward(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId>;
}

impl NoiseModel for UNetLite {
    fn forward(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
        UNetLite::forward(self, g, x, t)
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)`; all noise comes from `seed`.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &DiffusionSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<DenseTensor> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut x = DenseTensor::randn(shape, 1.0, &mut rng);
    let n = shape.first().copied().unwrap_or(1);
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict_noise(&x, &vec![t - 1; n])?;
        let z = if t > 1 {
            DenseTensor::randn(shape, 1.0, &mut rng)
        } else {
            DenseTensor::zeros(shape)
        };
        x = p_step(&x, t, &eps, schedule, &z)?;
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("non-finite sample at step {t}")));
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Mean loss over the accumulated micro-batches.
    pub loss: f64,
    /// Norm of the averaged gradient before clipping.
    pub grad_norm: f64,
}

fn grad_norm(g: &Gradients) -> f64 {
    g.values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Loss `mean((ε_θ(x_t, t) - ε)²)` on one micro-batch, with its gradients.
pub fn diffusion_loss<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &DenseTensor,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let n = x0.shape()[0];
    let per = x0.len() / n;
    let t: Vec<usize> = (0..n)
        .map(|_| rng.gen_range(1..=schedule.steps()))
        .collect();
    let eps = DenseTensor::randn(x0.shape(), 1.0, rng);
    let mut xt = x0.clone();
    for (b, &tb) in t.iter().enumerate() {
        let lo = b * per;
        let chunk0 = DenseTensor::new(vec![per], x0.data()[lo..lo + per].to_vec())?;
        let chunke = DenseTensor::new(vec![per], eps.data()[lo..lo + per].to_vec())?;
        let noisy = q_sample(&chunk0, tb, &chunke, schedule)?;
        xt.data_mut()[lo..lo + per].copy_from_slice(noisy.data());
    }
    let mut g = Graph::new();
    let xi = g.constant(xt);
    let idx: Vec<usize> = t.iter().map(|t| t - 1).collect();
    let pred = model.forward(&mut g, xi, &idx)?;
    let target = g.constant(eps);
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss is {value}")));
    }
    Ok((value, g.backward(loss)?))
}

/// One optimizer update from `micro_batches.len()` accumulated micro-batches.
///
/// Each micro-batch is `[n, c, D, H, W]` scaled to `[-1, 1]`. Gradients are
/// averaged, optionally clipped to `clip` in global norm, then applied.
pub fn train_step<M: NoiseModel, R: Rng + ?Sized>(
    model: &mut M,
    micro_batches: &[DenseTensor],
    schedule: &DiffusionSchedule,
    rng: &mut R,
    optimizer: &mut dyn Optimizer,
    clip: Option<f64>,
) -> Result<StepStats> {
    if micro_batches.is_empty() || micro_batches.iter().any(|b| b.shape().first() == Some(&0)) {
        return Err(Error::InvalidConfig("empty training batch".into()));
    }
    let k = micro_batches.len() as f64;
    let mut total = Gradients::new();
    let mut loss = 0.0;
    for batch in micro_batches {
        let (l, grads) = diffusion_loss(model, batch, schedule, rng)?;
        loss += l / k;
        for (name, g) in grads {
            let g = g.scale(1.0 / k);
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let norm = grad_norm(&total);
    if !norm.is_finite() {
        return Err(Error::Diverged(format!("gradient norm is {norm}")));
    }
    if let Some(max) = clip {
        if norm > max {
            let s = max / norm;
            for g in total.values_mut() {
                *g = g.scale(s);
            }
        }
    }
    optimizer.step(model, &total)?;
    Ok(StepStats {
        loss,
        grad_norm: norm,
    })
}

#[cfg(test)]
mod tests;
