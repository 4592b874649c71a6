use rand::Rng;

use super::{conv3d, ConvGeometry};
use crate::adapters::{adapter_for_kernel, AdapterKind, AdapterState};
use crate::autodiff::{Graph, NodeId, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{contract_pair, DenseTensor};

fn adapter_prefix(layer: &str) -> String {
    format!("{layer}.adapter")
}

fn visit_layer(
    weight: &Parameter,
    bias: &Parameter,
    adapter: Option<&AdapterState>,
    layer: &str,
    f: &mut dyn FnMut(&str, &DenseTensor, bool),
) {
    f(&weight.name, &weight.tensor, weight.trainable);
    f(&bias.name, &bias.tensor, bias.trainable);
    if let Some(a) = adapter {
        a.visit_cores(&adapter_prefix(layer), f);
    }
}

fn visit_layer_mut(
    weight: &mut Parameter,
    bias: &mut Parameter,
    adapter: Option<&mut AdapterState>,
    layer: &str,
    f: &mut dyn FnMut(&str, &mut DenseTensor, bool),
) {
    f(&weight.name, &mut weight.tensor, weight.trainable);
    f(&bias.name, &mut bias.tensor, bias.trainable);
    if let Some(a) = adapter {
        a.visit_cores_mut(&adapter_prefix(layer), f);
    }
}

/// Base weight plus the adapter update, as graph nodes.
fn effective_weight(
    g: &mut Graph,
    layer: &str,
    weight: &Parameter,
    adapter: Option<&AdapterState>,
) -> Result<NodeId> {
    let w = g.param(weight);
    match adapter {
        Some(a) => {
            let d = a.delta_node(g, &adapter_prefix(layer), weight.tensor.shape())?;
            g.add(w, d)
        }
        None => Ok(w),
    }
}

/// 3D convolution with an optional tensor-network adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dLayer {
    pub name: String,
    pub weight: Parameter,
    pub bias: Parameter,
    pub geom: ConvGeometry,
    pub adapter: Option<AdapterState>,
}

impl Conv3dLayer {
    /// Weights from `N(0, 1/fan_in)` scaled by `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_out: usize,
        c_in: usize,
        kernel: [usize; 3],
        geom: ConvGeometry,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel.iter().product::<usize>()) as f64;
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        Self {
            name: name.to_string(),
            weight: Parameter::new(
                format!("{name}.weight"),
                DenseTensor::randn(&shape, gain / fan_in.sqrt(), rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), DenseTensor::zeros(&[c_out])),
            geom,
            adapter: None,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    /// Builds, initializes and attaches an adapter; returns its parameter count.
    pub fn attach(
        &mut self,
        kind: AdapterKind,
        rank: usize,
        scaling: f64,
        seed: u64,
    ) -> Result<usize> {
        let mut a = adapter_for_kernel(kind, self.weight.tensor.shape(), rank, seed)?;
        a.scaling = scaling;
        let n = a.param_count();
        self.adapter = Some(a);
        Ok(n)
    }

    /// `W + ΔW`, or `W` without an adapter.
    pub fn effective_kernel(&self) -> Result<DenseTensor> {
        match &self.adapter {
            Some(a) => a.merge(&self.weight.tensor),
            None => Ok(self.weight.tensor.clone()),
        }
    }

    /// Convolution with the merged kernel.
    pub fn forward_tensor(&self, x: &DenseTensor) -> Result<DenseTensor> {
        conv3d(
            x,
            &self.effective_kernel()?,
            Some(&self.bias.tensor),
            &self.geom,
        )
    }

    /// Base convolution plus a separate convolution with the update.
    pub fn forward_two_pass(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let base = conv3d(x, &self.weight.tensor, Some(&self.bias.tensor), &self.geom)?;
        match &self.adapter {
            Some(a) => {
                let delta = a.materialize_delta()?.reshape(self.weight.tensor.shape())?;
                base.add(&conv3d(x, &delta, None, &self.geom)?)
            }
            None => Ok(base),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = effective_weight(g, &self.name, &self.weight, self.adapter.as_ref())?;
        let b = g.param(&self.bias);
        g.conv3d(x, w, Some(b), self.geom)
    }

    /// Folds the adapter into the base weight and drops it.
    pub fn merge_adapter(&mut self) -> Result<()> {
        if let Some(a) = self.adapter.take() {
            self.weight.tensor = a.merge(&self.weight.tensor)?;
        }
        Ok(())
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        visit_layer(
            &self.weight,
            &self.bias,
            self.adapter.as_ref(),
            &self.name,
            f,
        )
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {
        visit_layer_mut(
            &mut self.weight,
            &mut self.bias,
            self.adapter.as_mut(),
            &self.name,
            f,
        )
    }
}

/// Dense layer `y = x Wᵀ + b` on `[n, d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub weight: Parameter,
    pub bias: Parameter,
    pub adapter: Option<AdapterState>,
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d_out: usize,
        d_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            name: name.to_string(),
            weight: Parameter::new(
                format!("{name}.weight"),
                DenseTensor::randn(&[d_out, d_in], gain / (d_in as f64).sqrt(), rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), DenseTensor::zeros(&[d_out])),
            adapter: None,
        }
    }

    pub fn attach(&mut self, rank: usize, scaling: f64, seed: u64) -> Result<usize> {
        let mut a = adapter_for_kernel(
            AdapterKind::QuantaLinear,
            self.weight.tensor.shape(),
            rank,
            seed,
        )?;
        a.scaling = scaling;
        let n = a.param_count();
        self.adapter = Some(a);
        Ok(n)
    }

    pub fn effective_weight(&self) -> Result<DenseTensor> {
        match &self.adapter {
            Some(a) => a.merge(&self.weight.tensor),
            None => Ok(self.weight.tensor.clone()),
        }
    }

    pub fn forward_tensor(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let y = contract_pair(x, &self.effective_weight()?, &[(1, 1)])?;
        let d_out = self.bias.tensor.len();
        Ok(DenseTensor::from_fn(y.shape(), |i| {
            y.get(i) + self.bias.tensor.data()[i[1] % d_out]
        }))
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        if g.value(x).order() != 2 {
            return Err(Error::shape(format!(
                "{} expects [n, d_in], got {:?}",
                self.name,
                g.value(x).shape()
            )));
        }
        let w = effective_weight(g, &self.name, &self.weight, self.adapter.as_ref())?;
        let y = g.contract(x, w, &[(1, 1)])?;
        let b = g.param(&self.bias);
        g.add_broadcast(y, b, 1..2)
    }

    pub fn merge_adapter(&mut self) -> Result<()> {
        if let Some(a) = self.adapter.take() {
            self.weight.tensor = a.merge(&self.weight.tensor)?;
        }
        Ok(())
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        visit_layer(
            &self.weight,
            &self.bias,
            self.adapter.as_ref(),
            &self.name,
            f,
        )
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {
        visit_layer_mut(
            &mut self.weight,
            &mut self.bias,
            self.adapter.as_mut(),
            &self.name,
            f,
        )
    }
}

/// Group normalization with per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormLayer {
    pub name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), DenseTensor::ones(&[channels])),
            beta: Parameter::new(format!("{name}.beta"), DenseTensor::zeros(&[channels])),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.group_norm(x, gamma, beta, self.groups, self.eps)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        f(&self.gamma.name, &self.gamma.tensor, self.gamma.trainable);
        f(&self.beta.name, &self.beta.tensor, self.beta.trainable);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {
        f(
            &self.gamma.name,
            &mut self.gamma.tensor,
            self.gamma.trainable,
        );
        f(&self.beta.name, &mut self.beta.tensor, self.beta.trainable);
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.gamma.trainable = trainable;
        self.beta.trainable = trainable;
    }
}

/// Interleaved `sin(t ω_j), cos(t ω_j)` with `ω_j = 10000^(-2j/dim)`.
pub fn time_embedding(t: usize, dim: usize, steps: usize) -> Result<DenseTensor> {
    if t >= steps {
        return Err(Error::OutOfRange(format!(
            "time step {t} not in [0, {steps})"
        )));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "time embedding dimension {dim} must be even and positive"
        )));
    }
    let mut out = vec![0.0; dim];
    for j in 0..dim / 2 {
        let omega = 10000f64.powf(-((2 * j) as f64) / dim as f64);
        let phase = t as f64 * omega;
        out[2 * j] = phase.sin();
        out[2 * j + 1] = phase.cos();
    }
    DenseTensor::new(vec![dim], out)
}
