//! Tensor-network weight updates for convolution and linear layers.
//!
//! Every adapter is a [`TensorNetwork`] whose open legs reshape to the kernel
//! of the layer it adapts. At initialization the trainable network is copied
//! into a frozen twin, and the effective update is
//! `scaling * (contract(trainable) - contract(frozen))`, which is exactly zero
//! until the first optimizer step.
//!
//! # Wirings
//!
//! Physical legs are listed first in every core; the remaining legs have
//! length `r` and are all contracted.
//!
//! TenVOO-L (`A1..M` as below, 15 rank edges):
//!
//! ```text
//! A1[i1,i2,r,r]  A2[i3,r,r,r]  B1[o1,o2,r,r]  B2[o3,r,r,r]
//! Kd[kd,r,r,r]   Kh[kh,r,r,r]  Kw[kw,r,r,r]   M[r,r,r]  D1[r,r,r,r]  D2[r,r,r,r]
//!
//! A1.2-A2.1  A1.3-D1.0  A2.2-D1.1  A2.3-Kd.1
//! B1.2-B2.1  B1.3-D2.0  B2.2-D2.1  B2.3-Kw.1
//! D1.2-Kh.1  D2.2-Kh.2  D1.3-M.0   D2.3-M.1   M.2-Kh.3
//! Kd.2-Kw.2  Kd.3-Kw.3
//! ```
//!
//! TenVOO-Q (gates `G1..G3` between the channel and kernel cores):
//!
//! ```text
//! A1[i1,i2,r,r]  B1[o1,o2,r,r]  Kh[kh,r,r]  A2[i3,r,r,r]  B2[o3,r,r,r]
//! Kd[kd,r,r,r]   Kw[kw,r,r,r]   G1,G2,G3[r,r,r,r]
//!
//! A1.2-G1.0  A1.3-G1.1  A2.1-G1.2  A2.2-G2.0  A2.3-Kd.1
//! G1.3-G2.1  Kd.2-G2.2  Kd.3-G3.0  G2.3-G3.1  Kh.1-G3.2
//! G3.3-B1.2  Kh.2-B2.1  Kw.1-B1.3  Kw.2-B2.2  Kw.3-B2.3
//! ```
//!
//! Both contract to `[o1,o2,o3,i1,i2,i3,kd,kh,kw]`, which reshapes to
//! `[c_out, c_in, kd, kh, kw]` with no permutation.

mod build;

pub use build::{
    build_lora2d, build_lora3d, build_quanta_linear, build_tenvoo_l, build_tenvoo_q,
    tenvoo_l_count, tenvoo_q_count,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{factorize_channels, DenseTensor, Edge, LegRef, TensorNetwork};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    TenvooL,
    TenvooQ,
    Lora2d,
    Lora3d,
    QuantaLinear,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::TenvooL,
        AdapterKind::TenvooQ,
        AdapterKind::Lora2d,
        AdapterKind::Lora3d,
        AdapterKind::QuantaLinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::TenvooL => "tenvoo-l",
            AdapterKind::TenvooQ => "tenvoo-q",
            AdapterKind::Lora2d => "lora2d",
            AdapterKind::Lora3d => "lora3d",
            AdapterKind::QuantaLinear => "quanta-linear",
        }
    }

    /// Whether this kind adapts convolution kernels.
    pub fn is_conv(&self) -> bool {
        !matches!(self, AdapterKind::QuantaLinear)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown adapter kind {s:?}")))
    }
}

/// Kernel extents of a 3D convolution plus the channel tensorizations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvKernelDims {
    pub c_out: usize,
    pub c_in: usize,
    pub k_d: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub o: [usize; 3],
    pub i: [usize; 3],
}

impl ConvKernelDims {
    /// Uses the balanced factorization for both channel counts.
    pub fn new(c_out: usize, c_in: usize, kernel: [usize; 3]) -> Self {
        let (o1, o2, o3) = factorize_channels(c_out);
        let (i1, i2, i3) = factorize_channels(c_in);
        Self {
            c_out,
            c_in,
            k_d: kernel[0],
            k_h: kernel[1],
            k_w: kernel[2],
            o: [o1, o2, o3],
            i: [i1, i2, i3],
        }
    }

    pub fn with_factors(
        c_out: usize,
        c_in: usize,
        kernel: [usize; 3],
        o: [usize; 3],
        i: [usize; 3],
    ) -> Result<Self> {
        let d = Self {
            c_out,
            c_in,
            k_d: kernel[0],
            k_h: kernel[1],
            k_w: kernel[2],
            o,
            i,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.o.iter().product::<usize>() != self.c_out {
            return Err(Error::Factorization(format!(
                "{:?} does not multiply to c_out = {}",
                self.o, self.c_out
            )));
        }
        if self.i.iter().product::<usize>() != self.c_in {
            return Err(Error::Factorization(format!(
                "{:?} does not multiply to c_in = {}",
                self.i, self.c_in
            )));
        }
        if [self.c_out, self.c_in, self.k_d, self.k_h, self.k_w].contains(&0) {
            return Err(Error::Factorization("zero-length kernel axis".into()));
        }
        Ok(())
    }

    pub fn kernel(&self) -> [usize; 3] {
        [self.k_d, self.k_h, self.k_w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.k_d, self.k_h, self.k_w]
    }
}

/// What an adapter's update reshapes into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "kebab-case")]
pub enum AdapterDims {
    Conv3d(ConvKernelDims),
    Conv2d {
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
    },
    Linear {
        d_out: usize,
        d_in: usize,
        m: [usize; 3],
        n: [usize; 3],
    },
}

/// Serializable description of an adapter's network, without values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTopology {
    pub kind: AdapterKind,
    pub rank: usize,
    pub dims: AdapterDims,
    pub kernel_shape: Vec<usize>,
    pub scaling: f64,
    pub core_shapes: BTreeMap<String, Vec<usize>>,
    pub fixed_cores: Vec<String>,
    pub edges: Vec<Edge>,
    pub open_legs: Vec<LegRef>,
}

/// Trainable network, its frozen initialization copy, and how it maps onto a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub kind: AdapterKind,
    pub rank: usize,
    pub dims: AdapterDims,
    pub scaling: f64,
    kernel_shape: Vec<usize>,
    trainable_net: TensorNetwork,
    frozen_net: TensorNetwork,
    fixed_cores: Vec<String>,
    initialized: bool,
    frozen_kernel: Option<DenseTensor>,
}

impl AdapterState {
    pub(crate) fn from_parts(
        kind: AdapterKind,
        rank: usize,
        dims: AdapterDims,
        kernel_shape: Vec<usize>,
        net: TensorNetwork,
        fixed_cores: Vec<String>,
    ) -> Self {
        Self {
            kind,
            rank,
            dims,
            scaling: 1.0,
            kernel_shape,
            frozen_net: net.clone(),
            trainable_net: net,
            fixed_cores,
            initialized: false,
            frozen_kernel: None,
        }
    }

    /// Rebuilds a state from a topology and stored core values.
    pub fn from_topology(
        topo: &AdapterTopology,
        trainable: BTreeMap<String, DenseTensor>,
        frozen: BTreeMap<String, DenseTensor>,
    ) -> Result<Self> {
        let check = |cores: &BTreeMap<String, DenseTensor>| -> Result<()> {
            for (name, shape) in &topo.core_shapes {
                match cores.get(name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => {
                        return Err(Error::Format(format!(
                            "adapter core {name} missing or misshapen"
                        )))
                    }
                }
            }
            if cores.len() != topo.core_shapes.len() {
                return Err(Error::Format("unexpected adapter cores".into()));
            }
            Ok(())
        };
        check(&trainable)?;
        check(&frozen)?;
        let trainable_net =
            TensorNetwork::new(trainable, topo.edges.clone(), topo.open_legs.clone())?;
        let frozen_net = TensorNetwork::new(frozen, topo.edges.clone(), topo.open_legs.clone())?;
        let mut s = Self {
            kind: topo.kind,
            rank: topo.rank,
            dims: topo.dims.clone(),
            scaling: topo.scaling,
            kernel_shape: topo.kernel_shape.clone(),
            trainable_net,
            frozen_net,
            fixed_cores: topo.fixed_cores.clone(),
            initialized: true,
            frozen_kernel: None,
        };
        s.refresh_frozen()?;
        Ok(s)
    }

    pub fn topology(&self) -> AdapterTopology {
        AdapterTopology {
            kind: self.kind,
            rank: self.rank,
            dims: self.dims.clone(),
            kernel_shape: self.kernel_shape.clone(),
            scaling: self.scaling,
            core_shapes: self
                .trainable_net
                .cores()
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect(),
            fixed_cores: self.fixed_cores.clone(),
            edges: self.trainable_net.edges().to_vec(),
            open_legs: self.trainable_net.open_legs().to_vec(),
        }
    }

    pub fn kernel_shape(&self) -> &[usize] {
        &self.kernel_shape
    }

    pub fn trainable_net(&self) -> &TensorNetwork {
        &self.trainable_net
    }

    pub fn frozen_net(&self) -> &TensorNetwork {
        &self.frozen_net
    }

    pub fn fixed_cores(&self) -> &[String] {
        &self.fixed_cores
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn is_trainable_core(&self, name: &str) -> bool {
        self.trainable_net.core(name).is_some() && !self.fixed_cores.iter().any(|c| c == name)
    }

    /// Replaces a trainable core's values.
    pub fn set_core(&mut self, name: &str, value: DenseTensor) -> Result<()> {
        if !self.is_trainable_core(name) {
            return Err(Error::InvalidNetwork(format!(
                "{name} is not a trainable core"
            )));
        }
        self.trainable_net.set_core(name, value)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.trainable_net
            .cores()
            .iter()
            .filter(|(name, _)| !self.fixed_cores.contains(name))
            .map(|(_, t)| t.len())
            .sum()
    }

    fn rank_legs(&self, core: &str) -> usize {
        self.trainable_net
            .edges()
            .iter()
            .map(|e| usize::from(e.a.core == core) + usize::from(e.b.core == core))
            .sum()
    }

    /// Draws every trainable core from `N(0, r^-L)`, `L` being its number of
    /// rank legs, then snapshots the frozen copy.
    ///
    /// Cores are drawn in name order, row-major, from xoshiro256++ seeded with
    /// `seed`.
    pub fn init(&mut self, seed: u64) -> Result<()> {
        self.init_with_gain(seed, 1.0)
    }

    /// As [`init`](Self::init) with every standard deviation multiplied by `gain`.
    pub fn init_with_gain(&mut self, seed: u64, gain: f64) -> Result<()> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let names: Vec<String> = self.trainable_net.cores().keys().cloned().collect();
        for name in names {
            if self.fixed_cores.contains(&name) {
                continue;
            }
            let shape = self
                .trainable_net
                .core(&name)
                .expect("core")
                .shape()
                .to_vec();
            let legs = self.rank_legs(&name) as i32;
            let std = gain * (self.rank as f64).powi(-legs).sqrt();
            self.trainable_net
                .set_core(&name, DenseTensor::randn(&shape, std, &mut rng))?;
        }
        self.frozen_net = self.trainable_net.clone();
        self.initialized = true;
        self.refresh_frozen()
    }

    fn refresh_frozen(&mut self) -> Result<()> {
        let plan = self.frozen_net.plan()?;
        let t = self.frozen_net.contract_with(&plan)?;
        self.frozen_kernel = Some(t.reshape(&self.kernel_shape)?);
        Ok(())
    }

    /// Contraction of the trainable network alone, in kernel layout.
    pub fn trainable_kernel(&self) -> Result<DenseTensor> {
        self.trainable_net.contract()?.reshape(&self.kernel_shape)
    }

    /// Contraction of the frozen copy, in kernel layout.
    pub fn frozen_kernel(&self) -> Result<&DenseTensor> {
        self.frozen_kernel
            .as_ref()
            .ok_or(Error::UninitializedAdapter)
    }

    /// `scaling * (T_trainable - T_frozen)` in kernel layout.
    pub fn materialize_delta(&self) -> Result<DenseTensor> {
        let frozen = self.frozen_kernel()?;
        Ok(self.trainable_kernel()?.sub(frozen)?.scale(self.scaling))
    }

    /// Adds this adapter's update to a base kernel of compatible shape.
    pub fn merge(&self, base: &DenseTensor) -> Result<DenseTensor> {
        let delta = self.delta_for(base.shape())?;
        base.add(&delta)
    }

    pub fn unmerge(&self, merged: &DenseTensor) -> Result<DenseTensor> {
        let delta = self.delta_for(merged.shape())?;
        merged.sub(&delta)
    }

    fn delta_for(&self, shape: &[usize]) -> Result<DenseTensor> {
        self.check_target(shape)?;
        self.materialize_delta()?.reshape(shape)
    }

    /// A layer kernel is compatible when it equals the adapter's kernel shape
    /// up to singleton axes (a 2D update on a `k = 1` axis of a 3D kernel).
    pub fn check_target(&self, shape: &[usize]) -> Result<()> {
        let squeeze = |s: &[usize]| s.iter().copied().filter(|&d| d != 1).collect::<Vec<_>>();
        let ok = shape.len() >= self.kernel_shape.len()
            && squeeze(shape) == squeeze(&self.kernel_shape)
            && shape[..2] == self.kernel_shape[..2];
        if !ok {
            return Err(Error::shape(format!(
                "adapter kernel {:?} does not fit layer kernel {shape:?}",
                self.kernel_shape
            )));
        }
        Ok(())
    }

    /// Records the effective update as graph nodes and returns it shaped like `target`.
    ///
    /// Trainable cores become leaves named `{prefix}.{core}`; fixed cores and
    /// the frozen contraction enter as constants.
    pub fn delta_node(&self, graph: &mut Graph, prefix: &str, target: &[usize]) -> Result<NodeId> {
        self.check_target(target)?;
        let frozen = self.frozen_kernel()?.clone();
        let plan = self.trainable_net.plan()?;
        let mut leaves = Vec::with_capacity(plan.core_order.len());
        for name in &plan.core_order {
            let value = self.trainable_net.core(name).expect("core").clone();
            let id = if self.fixed_cores.contains(name) {
                graph.constant(value)
            } else {
                graph.leaf(&format!("{prefix}.{name}"), value, true)
            };
            leaves.push(id);
        }
        let t = graph.contract_plan(&plan, &leaves)?;
        let t = graph.reshape(t, &self.kernel_shape)?;
        let f = graph.constant(frozen);
        let d = graph.sub(t, f)?;
        let d = graph.scale(d, self.scaling);
        graph.reshape(d, target)
    }

    /// Visits trainable cores as `({prefix}.{core}, tensor)`.
    pub fn visit_cores(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        for (name, t) in self.trainable_net.cores() {
            if !self.fixed_cores.contains(name) {
                f(&format!("{prefix}.{name}"), t, true);
            }
        }
    }

    pub fn visit_cores_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut DenseTensor, bool),
    ) {
        let names: Vec<String> = self.trainable_net.cores().keys().cloned().collect();
        for name in names {
            if self.fixed_cores.contains(&name) {
                continue;
            }
            let mut t = self.trainable_net.core(&name).expect("core").clone();
            f(&format!("{prefix}.{name}"), &mut t, true);
            self.trainable_net
                .set_core(&name, t)
                .expect("visitor must keep core shapes");
        }
    }

    /// Drops the `Kh` core of a TenVOO-L network, closing its three rank legs
    /// with a fixed copy tensor. The update becomes `[c_out, c_in, kd, kw]`.
    pub fn degenerate_to_2d(&self) -> Result<AdapterState> {
        if self.kind != AdapterKind::TenvooL || self.kernel_shape.len() != 5 {
            return Err(Error::WrongAdapterKind {
                expected: "3D tenvoo-l".into(),
                found: self.kind.to_string(),
            });
        }
        let r = self.rank;
        let copy = DenseTensor::from_fn(&[r, r, r], |i| {
            if i[0] == i[1] && i[1] == i[2] {
                1.0
            } else {
                0.0
            }
        });
        let rewire = |net: &TensorNetwork| -> Result<TensorNetwork> {
            let mut cores = net.cores().clone();
            cores.remove("Kh");
            cores.insert("Ih".into(), copy.clone());
            let mut edges = Vec::new();
            let mut slot = 0;
            for e in net.edges() {
                let (kh_leg, other) = if e.a.core == "Kh" {
                    (e.a.leg, &e.b)
                } else if e.b.core == "Kh" {
                    (e.b.leg, &e.a)
                } else {
                    edges.push(e.clone());
                    continue;
                };
                debug_assert!(kh_leg >= 1);
                edges.push(Edge {
                    a: other.clone(),
                    b: LegRef::new("Ih", slot),
                });
                slot += 1;
            }
            let open = net
                .open_legs()
                .iter()
                .filter(|l| l.core != "Kh")
                .cloned()
                .collect();
            TensorNetwork::new(cores, edges, open)
        };
        let ConvKernelDims {
            c_out,
            c_in,
            k_d,
            k_w,
            ..
        } = match &self.dims {
            AdapterDims::Conv3d(d) => d.clone(),
            _ => unreachable!("checked above"),
        };
        let mut fixed = self.fixed_cores.clone();
        fixed.push("Ih".into());
        let mut out = Self {
            kind: self.kind,
            rank: r,
            dims: self.dims.clone(),
            scaling: self.scaling,
            kernel_shape: vec![c_out, c_in, k_d, k_w],
            trainable_net: rewire(&self.trainable_net)?,
            frozen_net: rewire(&self.frozen_net)?,
            fixed_cores: fixed,
            initialized: self.initialized,
            frozen_kernel: None,
        };
        if out.initialized {
            out.refresh_frozen()?;
        }
        Ok(out)
    }
}

/// Builds and initializes an adapter for a layer kernel of the given shape.
///
/// Conv kernels are `[c_out, c_in, kd, kh, kw]`; linear weights `[d_out, d_in]`.
pub fn adapter_for_kernel(
    kind: AdapterKind,
    kernel: &[usize],
    rank: usize,
    seed: u64,
) -> Result<AdapterState> {
    let mut state = match (kind, kernel) {
        (AdapterKind::TenvooL, [co, ci, kd, kh, kw]) => {
            build_tenvoo_l(&ConvKernelDims::new(*co, *ci, [*kd, *kh, *kw]), rank)?
        }
        (AdapterKind::TenvooQ, [co, ci, kd, kh, kw]) => {
            build_tenvoo_q(&ConvKernelDims::new(*co, *ci, [*kd, *kh, *kw]), rank)?
        }
        (AdapterKind::Lora3d, [co, ci, kd, kh, kw]) => {
            build_lora3d(&ConvKernelDims::new(*co, *ci, [*kd, *kh, *kw]), rank)?
        }
        (AdapterKind::Lora2d, [co, ci, 1, kh, kw]) => build_lora2d(*co, *ci, *kh, *kw, rank)?,
        (AdapterKind::QuantaLinear, [d_out, d_in]) => build_quanta_linear(*d_out, *d_in, rank)?,
        _ => {
            return Err(Error::shape(format!(
                "{kind} cannot adapt a kernel of shape {kernel:?}"
            )))
        }
    };
    state.init(seed)?;
    Ok(state)
}

#[cfg(test)]
mod tests;
