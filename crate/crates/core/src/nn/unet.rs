use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::layers::{time_embedding, Conv3dLayer, GroupNormLayer, LinearLayer};
use super::ConvGeometry;
use crate::adapters::{AdapterKind, AdapterState};
use crate::autodiff::{Graph, NodeId, Parameter, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Architecture of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel width per resolution level; the last level holds attention.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub groups: usize,
    pub in_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            time_dim: 32,
            groups: 4,
            in_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "model.widths needs at least 2 levels".into(),
            ));
        }
        if self.groups == 0 {
            return Err(Error::InvalidConfig("model.groups must be positive".into()));
        }
        for &w in &self.widths {
            if w == 0 || w % self.groups != 0 {
                return Err(Error::InvalidConfig(format!(
                    "model.widths entry {w} must be a positive multiple of groups = {}",
                    self.groups
                )));
            }
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "model.time_dim {} must be even and positive",
                self.time_dim
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig(
                "model.in_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Which layers receive adapters and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub rank: usize,
    #[serde(default = "one")]
    pub scaling: f64,
    /// Leaves non-target layers trainable.
    #[serde(default)]
    pub joint: bool,
    /// Target groups (see [`TARGET_GROUPS`]) or individual layer names.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

pub const TARGET_GROUPS: [&str; 4] = ["resnet-conv", "attn-qv", "time-embed", "time-proj"];

pub fn default_targets() -> Vec<String> {
    TARGET_GROUPS.iter().map(|s| s.to_string()).collect()
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, rank: usize) -> Self {
        Self {
            kind,
            rank,
            scaling: 1.0,
            joint: false,
            targets: default_targets(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachedLayer {
    pub layer: String,
    pub kind: AdapterKind,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachReport {
    pub layers: Vec<AttachedLayer>,
    pub adapter_params: usize,
    pub base_params: usize,
    pub trainable_params: usize,
}

impl AttachReport {
    /// Adapter parameters as a fraction of the base model.
    pub fn adapter_fraction(&self) -> f64 {
        self.adapter_params as f64 / self.base_params as f64
    }
}

/// Three-level (by default) U-Net noise predictor for volumes `[n, 1, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetLite {
    pub config: UNetConfig,
    /// Number of diffusion steps the time embedding accepts.
    pub steps: usize,
    convs: BTreeMap<String, Conv3dLayer>,
    linears: BTreeMap<String, LinearLayer>,
    norms: BTreeMap<String, GroupNormLayer>,
}

struct Builder<'a> {
    rng: &'a mut Xoshiro256PlusPlus,
    groups: usize,
    time_dim: usize,
    convs: BTreeMap<String, Conv3dLayer>,
    linears: BTreeMap<String, LinearLayer>,
    norms: BTreeMap<String, GroupNormLayer>,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        geom: ConvGeometry,
        gain: f64,
    ) {
        let layer = Conv3dLayer::new(name, c_out, c_in, [k; 3], geom, gain, self.rng);
        self.convs.insert(name.into(), layer);
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) {
        let layer = LinearLayer::new(name, d_out, d_in, 1.0, self.rng);
        self.linears.insert(name.into(), layer);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.norms
            .insert(name.into(), GroupNormLayer::new(name, c, self.groups));
    }

    fn resblock(&mut self, p: &str, c_in: usize, c_out: usize) {
        self.norm(&format!("{p}.norm1"), c_in);
        self.conv(
            &format!("{p}.conv1"),
            c_out,
            c_in,
            3,
            ConvGeometry::same([3; 3]),
            1.0,
        );
        self.linear(&format!("{p}.time_proj"), c_out, self.time_dim);
        self.norm(&format!("{p}.norm2"), c_out);
        self.conv(
            &format!("{p}.conv2"),
            c_out,
            c_out,
            3,
            ConvGeometry::same([3; 3]),
            1.0,
        );
        if c_in != c_out {
            self.conv(
                &format!("{p}.skip"),
                c_out,
                c_in,
                1,
                ConvGeometry::same([1; 3]),
                1.0,
            );
        }
    }
}

impl UNetLite {
    pub fn new(config: UNetConfig, steps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if steps == 0 {
            return Err(Error::InvalidConfig(
                "diffusion steps must be positive".into(),
            ));
        }
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let td = config.time_dim;
        let w = &config.widths;
        let levels = w.len();
        let mut b = Builder {
            rng: &mut rng,
            groups: config.groups,
            time_dim: td,
            convs: BTreeMap::new(),
            linears: BTreeMap::new(),
            norms: BTreeMap::new(),
        };
        b.linear("time_embed.lin1", td, td);
        b.linear("time_embed.lin2", td, td);
        b.conv(
            "conv_in",
            w[0],
            config.in_channels,
            3,
            ConvGeometry::same([3; 3]),
            1.0,
        );
        let mut c = w[0];
        for l in 0..levels - 1 {
            b.resblock(&format!("enc{l}.res0"), c, w[l]);
            b.resblock(&format!("enc{l}.res1"), w[l], w[l]);
            b.conv(
                &format!("down{l}"),
                w[l],
                w[l],
                3,
                ConvGeometry::strided(2, 1),
                1.0,
            );
            c = w[l];
        }
        let top = w[levels - 1];
        b.resblock("mid.res0", c, top);
        b.norm("mid.attn.norm", top);
        for proj in ["q", "k", "v", "out"] {
            b.linear(&format!("mid.attn.{proj}"), top, top);
        }
        b.resblock("mid.res1", top, top);
        for l in (0..levels - 1).rev() {
            b.conv(
                &format!("up{l}"),
                w[l],
                w[l + 1],
                3,
                ConvGeometry::same([3; 3]),
                1.0,
            );
            b.resblock(&format!("dec{l}.res0"), 2 * w[l], w[l]);
            b.resblock(&format!("dec{l}.res1"), w[l], w[l]);
        }
        b.norm("out_norm", w[0]);
        b.conv(
            "conv_out",
            config.in_channels,
            w[0],
            3,
            ConvGeometry::same([3; 3]),
            0.1,
        );
        let (convs, linears, norms) = (b.convs, b.linears, b.norms);
        Ok(Self {
            config,
            steps,
            convs,
            linears,
            norms,
        })
    }

    pub fn convs(&self) -> &BTreeMap<String, Conv3dLayer> {
        &self.convs
    }

    pub fn linears(&self) -> &BTreeMap<String, LinearLayer> {
        &self.linears
    }

    pub fn norms(&self) -> &BTreeMap<String, GroupNormLayer> {
        &self.norms
    }

    pub fn conv_mut(&mut self, name: &str) -> Option<&mut Conv3dLayer> {
        self.convs.get_mut(name)
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut LinearLayer> {
        self.linears.get_mut(name)
    }

    pub fn norm_mut(&mut self, name: &str) -> Option<&mut GroupNormLayer> {
        self.norms.get_mut(name)
    }

    fn resblock_names(&self) -> Vec<String> {
        self.convs
            .keys()
            .filter_map(|k| k.strip_suffix(".conv1").map(str::to_string))
            .collect()
    }

    /// Names of the layers a target group or layer name refers to.
    pub fn resolve_target(&self, target: &str) -> Result<Vec<String>> {
        let blocks = self.resblock_names();
        let names = match target {
            "resnet-conv" => blocks
                .iter()
                .flat_map(|b| [format!("{b}.conv1"), format!("{b}.conv2")])
                .collect(),
            "attn-qv" => vec!["mid.attn.q".into(), "mid.attn.v".into()],
            "time-embed" => vec!["time_embed.lin1".into(), "time_embed.lin2".into()],
            "time-proj" => blocks.iter().map(|b| format!("{b}.time_proj")).collect(),
            name if self.convs.contains_key(name) || self.linears.contains_key(name) => {
                vec![name.to_string()]
            }
            other => return Err(Error::UnknownTarget(other.to_string())),
        };
        Ok(names)
    }

    /// Number of parameters excluding adapter cores.
    pub fn base_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_base(&mut |_, t, _| n += t.len());
        n
    }

    pub fn adapter_param_count(&self) -> usize {
        self.num_params() - self.base_param_count()
    }

    /// Visits every parameter that is not an adapter core.
    pub fn visit_base(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        for l in self.convs.values() {
            f(&l.weight.name, &l.weight.tensor, l.weight.trainable);
            f(&l.bias.name, &l.bias.tensor, l.bias.trainable);
        }
        for l in self.linears.values() {
            f(&l.weight.name, &l.weight.tensor, l.weight.trainable);
            f(&l.bias.name, &l.bias.tensor, l.bias.trainable);
        }
        for n in self.norms.values() {
            n.visit(f);
        }
    }

    /// The base parameter called `name` (`{layer}.weight`, `.bias`, `.gamma`, `.beta`).
    pub fn base_param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let (layer, field) = name.rsplit_once('.')?;
        match field {
            "weight" | "bias" => {
                if let Some(l) = self.convs.get_mut(layer) {
                    return Some(if field == "weight" {
                        &mut l.weight
                    } else {
                        &mut l.bias
                    });
                }
                let l = self.linears.get_mut(layer)?;
                Some(if field == "weight" {
                    &mut l.weight
                } else {
                    &mut l.bias
                })
            }
            "gamma" => self.norms.get_mut(layer).map(|n| &mut n.gamma),
            "beta" => self.norms.get_mut(layer).map(|n| &mut n.beta),
            _ => None,
        }
    }

    /// Adapter state of a conv or linear layer.
    pub fn adapter_slot(&mut self, layer: &str) -> Option<&mut Option<AdapterState>> {
        if let Some(l) = self.convs.get_mut(layer) {
            return Some(&mut l.adapter);
        }
        self.linears.get_mut(layer).map(|l| &mut l.adapter)
    }

    /// Attached adapters keyed by layer name.
    pub fn adapters(&self) -> BTreeMap<String, &AdapterState> {
        let convs = self
            .convs
            .iter()
            .filter_map(|(k, l)| Some((k.clone(), l.adapter.as_ref()?)));
        let linears = self
            .linears
            .iter()
            .filter_map(|(k, l)| Some((k.clone(), l.adapter.as_ref()?)));
        convs.chain(linears).collect()
    }

    /// Copies of every base parameter, keyed by name.
    pub fn base_params(&self) -> BTreeMap<String, DenseTensor> {
        let mut out = BTreeMap::new();
        self.visit_base(&mut |name, t, _| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for l in self.convs.values_mut() {
            l.weight.trainable = trainable;
            l.bias.trainable = trainable;
        }
        for l in self.linears.values_mut() {
            l.weight.trainable = trainable;
            l.bias.trainable = trainable;
        }
        for n in self.norms.values_mut() {
            n.set_trainable(trainable);
        }
    }

    /// Attaches adapters to every target and freezes the base model.
    ///
    /// Convolutions get `spec.kind`; linear layers always get the chain
    /// adapter. In joint mode only the targets' own weights are frozen.
    pub fn attach_adapters(&mut self, spec: &AdapterSpec) -> Result<AttachReport> {
        if spec.rank == 0 {
            return Err(Error::InvalidRank(0));
        }
        if !spec.kind.is_conv() {
            return Err(Error::WrongAdapterKind {
                expected: "a convolution adapter".into(),
                found: spec.kind.to_string(),
            });
        }
        let mut names = Vec::new();
        for t in &spec.targets {
            for n in self.resolve_target(t)? {
                if !names.contains(&n) {
                    names.push(n);
                }
            }
        }
        names.sort();
        let mut staged = self.clone();
        if !spec.joint {
            staged.set_all_trainable(false);
        }
        let mut layers = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let seed = spec.seed.wrapping_add(i as u64);
            let (kind, params) = if let Some(l) = staged.convs.get_mut(name) {
                if l.adapter.is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "{name} already has an adapter"
                    )));
                }
                l.weight.trainable = false;
                l.bias.trainable = false;
                (
                    spec.kind,
                    l.attach(spec.kind, spec.rank, spec.scaling, seed)?,
                )
            } else {
                let l = staged.linears.get_mut(name).expect("resolved target");
                if l.adapter.is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "{name} already has an adapter"
                    )));
                }
                l.weight.trainable = false;
                l.bias.trainable = false;
                (
                    AdapterKind::QuantaLinear,
                    l.attach(spec.rank, spec.scaling, seed)?,
                )
            };
            layers.push(AttachedLayer {
                layer: name.clone(),
                kind,
                params,
            });
        }
        *self = staged;
        Ok(AttachReport {
            adapter_params: layers.iter().map(|l| l.params).sum(),
            layers,
            base_params: self.base_param_count(),
            trainable_params: self.num_trainable(),
        })
    }

    /// A copy with every adapter folded into its layer's weights.
    pub fn merged(&self) -> Result<Self> {
        let mut m = self.clone();
        for l in m.convs.values_mut() {
            l.merge_adapter()?;
        }
        for l in m.linears.values_mut() {
            l.merge_adapter()?;
        }
        Ok(m)
    }

    pub fn has_adapters(&self) -> bool {
        self.convs.values().any(|l| l.adapter.is_some())
            || self.linears.values().any(|l| l.adapter.is_some())
    }

    fn conv(&self, g: &mut Graph, name: &str, x: NodeId) -> Result<NodeId> {
        self.convs[name].forward(g, x)
    }

    fn linear(&self, g: &mut Graph, name: &str, x: NodeId) -> Result<NodeId> {
        self.linears[name].forward(g, x)
    }

    fn norm(&self, g: &mut Graph, name: &str, x: NodeId) -> Result<NodeId> {
        self.norms[name].forward(g, x)
    }

    fn resblock(&self, g: &mut Graph, p: &str, x: NodeId, temb: NodeId) -> Result<NodeId> {
        let h = self.norm(g, &format!("{p}.norm1"), x)?;
        let h = g.silu(h);
        let h = self.conv(g, &format!("{p}.conv1"), h)?;
        let te = g.silu(temb);
        let te = self.linear(g, &format!("{p}.time_proj"), te)?;
        let h = g.add_broadcast(h, te, 0..2)?;
        let h = self.norm(g, &format!("{p}.norm2"), h)?;
        let h = g.silu(h);
        let h = self.conv(g, &format!("{p}.conv2"), h)?;
        let skip_name = format!("{p}.skip");
        let skip = if self.convs.contains_key(&skip_name) {
            self.conv(g, &skip_name, x)?
        } else {
            x
        };
        g.add(h, skip)
    }

    /// Single-head self-attention over all voxels.
    fn attention(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.value(x).shape().to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3] * s[4]);
        let h = self.norm(g, "mid.attn.norm", x)?;
        let h = g.reshape(h, &[n, c, l])?;
        let h = g.permute(h, &[0, 2, 1])?;
        let tokens = g.reshape(h, &[n * l, c])?;
        let q = self.linear(g, "mid.attn.q", tokens)?;
        let q = g.reshape(q, &[n, l, c])?;
        let k = self.linear(g, "mid.attn.k", tokens)?;
        let k = g.reshape(k, &[n, l, c])?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let v = self.linear(g, "mid.attn.v", tokens)?;
        let v = g.reshape(v, &[n, l, c])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax(scores)?;
        let o = g.bmm(attn, v)?;
        let o = g.reshape(o, &[n * l, c])?;
        let o = self.linear(g, "mid.attn.out", o)?;
        let o = g.reshape(o, &[n, l, c])?;
        let o = g.permute(o, &[0, 2, 1])?;
        let o = g.reshape(o, &s)?;
        g.add(x, o)
    }

    fn time_features(&self, t: &[usize]) -> Result<DenseTensor> {
        let dim = self.config.time_dim;
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            data.extend_from_slice(time_embedding(ti, dim, self.steps)?.data());
        }
        DenseTensor::new(vec![t.len(), dim], data)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let div = self.config.divisor();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected [n, {}, D, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2..].iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::shape(format!(
                "spatial extents {:?} must be positive multiples of {div}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    /// Records the noise prediction for `x` at 0-based time indices `t` (one per batch entry).
    pub fn forward(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        self.check_input(&shape)?;
        if t.len() != shape[0] {
            return Err(Error::shape(format!(
                "{} time steps for a batch of {}",
                t.len(),
                shape[0]
            )));
        }
        let tf = g.constant(self.time_features(t)?);
        let temb = self.linear(g, "time_embed.lin1", tf)?;
        let temb = g.silu(temb);
        let temb = self.linear(g, "time_embed.lin2", temb)?;

        let levels = self.config.widths.len();
        let mut h = self.conv(g, "conv_in", x)?;
        let mut skips = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            h = self.resblock(g, &format!("enc{l}.res0"), h, temb)?;
            h = self.resblock(g, &format!("enc{l}.res1"), h, temb)?;
            skips.push(h);
            h = self.conv(g, &format!("down{l}"), h)?;
        }
        h = self.resblock(g, "mid.res0", h, temb)?;
        h = self.attention(g, h)?;
        h = self.resblock(g, "mid.res1", h, temb)?;
        for l in (0..levels - 1).rev() {
            h = g.upsample2x(h)?;
            h = self.conv(g, &format!("up{l}"), h)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(&[h, skip])?;
            h = self.resblock(g, &format!("dec{l}.res0"), h, temb)?;
            h = self.resblock(g, &format!("dec{l}.res1"), h, temb)?;
        }
        h = self.norm(g, "out_norm", h)?;
        h = g.silu(h);
        self.conv(g, "conv_out", h)
    }

    /// Noise prediction without keeping the graph.
    pub fn predict(&self, x: &DenseTensor, t: &[usize]) -> Result<DenseTensor> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = self.forward(&mut g, xi, t)?;
        Ok(g.value(y).clone())
    }
}

impl Parameterized for UNetLite {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        for l in self.convs.values() {
            l.visit(f);
        }
        for l in self.linears.values() {
            l.visit(f);
        }
        for n in self.norms.values() {
            n.visit(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {
        for l in self.convs.values_mut() {
            l.visit_mut(f);
        }
        for l in self.linears.values_mut() {
            l.visit_mut(f);
        }
        for n in self.norms.values_mut() {
            n.visit_mut(f);
        }
    }
}

impl Parameterized for Conv3dLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        self.visit(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {
        self.visit_mut(f)
    }
}

impl Parameterized for LinearLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        self.visit(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {
        self.visit_mut(f)
    }
}
