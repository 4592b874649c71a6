//! `TVOOCKPT` container: magic, u32 LE version, u64 LE index length, JSON
//! index, then little-endian f64 blobs addressed by element offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiffusionConfig, TrainerOptimizer};
use crate::adapters::{AdapterState, AdapterTopology};
use crate::autodiff::{Adam, AdamSlot, Sgd};
use crate::error::{Error, Result};
use crate::nn::{AdapterSpec, UNetConfig, UNetLite};
use crate::tensor::DenseTensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TVOOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerMeta {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        /// Update count per parameter; moments are blobs `adam.m/…`, `adam.v/…`.
        steps: BTreeMap<String, u64>,
    },
    Sgd {
        lr: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub dtype: String,
    pub model: UNetConfig,
    pub diffusion: DiffusionConfig,
    pub step: u64,
    pub config_hash: String,
    pub adapter_spec: Option<AdapterSpec>,
    /// Trainable flag of each base parameter.
    pub trainable: BTreeMap<String, bool>,
    pub adapters: BTreeMap<String, AdapterTopology>,
    pub optimizer: OptimizerMeta,
    pub blobs: Vec<BlobRef>,
}

/// Everything needed to resume training or sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNetLite,
    pub diffusion: DiffusionConfig,
    pub optimizer: TrainerOptimizer,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub config_hash: String,
    pub adapter_spec: Option<AdapterSpec>,
}

struct Writer {
    blobs: Vec<BlobRef>,
    data: Vec<f64>,
}

impl Writer {
    fn push(&mut self, name: String, t: &DenseTensor) {
        self.blobs.push(BlobRef {
            name,
            shape: t.shape().to_vec(),
            offset: self.data.len() as u64,
        });
        self.data.extend_from_slice(t.data());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            blobs: Vec::new(),
            data: Vec::new(),
        };
        let mut trainable = BTreeMap::new();
        self.model.visit_base(&mut |name, t, flag| {
            trainable.insert(name.to_string(), flag);
            w.push(format!("param/{name}"), t);
        });
        let mut adapters = BTreeMap::new();
        for (layer, a) in self.model.adapters() {
            for (core, t) in a.trainable_net().cores() {
                w.push(format!("adapter/{layer}/trainable/{core}"), t);
            }
            for (core, t) in a.frozen_net().cores() {
                w.push(format!("adapter/{layer}/frozen/{core}"), t);
            }
            adapters.insert(layer, a.topology());
        }
        let optimizer = match &self.optimizer {
            TrainerOptimizer::Adam(adam) => {
                for (name, slot) in &adam.slots {
                    w.push(format!("adam.m/{name}"), &slot.m);
                    w.push(format!("adam.v/{name}"), &slot.v);
                }
                OptimizerMeta::Adam {
                    lr: adam.lr,
                    beta1: adam.beta1,
                    beta2: adam.beta2,
                    eps: adam.eps,
                    steps: adam
                        .slots
                        .iter()
                        .map(|(k, s)| (k.clone(), s.step))
                        .collect(),
                }
            }
            TrainerOptimizer::Sgd(sgd) => OptimizerMeta::Sgd { lr: sgd.lr },
        };
        let index = CheckpointIndex {
            dtype: "f64".into(),
            model: self.model.config.clone(),
            diffusion: self.diffusion.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            adapter_spec: self.adapter_spec.clone(),
            trainable,
            adapters,
            optimizer,
            blobs: w.blobs,
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * w.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &w.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (index, payload) = split(bytes)?;
        let mut blobs = BTreeMap::new();
        for b in &index.blobs {
            let n: usize = b.shape.iter().product();
            let start = usize::try_from(b.offset)
                .map_err(|_| Error::Format("blob offset overflow".into()))?;
            let bytes = payload.get(8 * start..8 * (start + n)).ok_or_else(|| {
                Error::Format(format!("blob {} runs past the end of the file", b.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if blobs
                .insert(b.name.clone(), DenseTensor::new(b.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::Format(format!("duplicate blob {}", b.name)));
            }
        }
        let mut take = |name: &str| -> Result<DenseTensor> {
            blobs
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing blob {name}")))
        };

        let mut model = UNetLite::new(index.model.clone(), index.diffusion.steps, 0)?;
        let names: Vec<String> = model.base_params().into_keys().collect();
        if names.len() != index.trainable.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} base parameters, model has {}",
                index.trainable.len(),
                names.len()
            )));
        }
        for name in names {
            let t = take(&format!("param/{name}"))?;
            let flag = *index
                .trainable
                .get(&name)
                .ok_or_else(|| Error::Format(format!("no trainable flag for {name}")))?;
            let p = model.base_param_mut(&name).expect("listed by the model");
            if p.tensor.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
            p.trainable = flag;
        }
        for (layer, topo) in &index.adapters {
            let mut trainable = BTreeMap::new();
            let mut frozen = BTreeMap::new();
            for core in topo.core_shapes.keys() {
                trainable.insert(
                    core.clone(),
                    take(&format!("adapter/{layer}/trainable/{core}"))?,
                );
                frozen.insert(
                    core.clone(),
                    take(&format!("adapter/{layer}/frozen/{core}"))?,
                );
            }
            let state = AdapterState::from_topology(topo, trainable, frozen)?;
            let weight_shape = model
                .base_param_mut(&format!("{layer}.weight"))
                .ok_or_else(|| Error::Format(format!("adapter on unknown layer {layer}")))?
                .tensor
                .shape()
                .to_vec();
            state.check_target(&weight_shape)?;
            *model.adapter_slot(layer).expect("layer exists") = Some(state);
        }
        let optimizer = match &index.optimizer {
            OptimizerMeta::Adam {
                lr,
                beta1,
                beta2,
                eps,
                steps,
            } => {
                let mut adam = Adam::new(*lr);
                adam.beta1 = *beta1;
                adam.beta2 = *beta2;
                adam.eps = *eps;
                for (name, step) in steps {
                    let m = take(&format!("adam.m/{name}"))?;
                    let v = take(&format!("adam.v/{name}"))?;
                    adam.slots
                        .insert(name.clone(), AdamSlot { step: *step, m, v });
                }
                TrainerOptimizer::Adam(adam)
            }
            OptimizerMeta::Sgd { lr } => TrainerOptimizer::Sgd(Sgd::new(*lr)),
        };
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::Format(format!("unexpected blob {extra}")));
        }
        Ok(Self {
            model,
            diffusion: index.diffusion,
            optimizer,
            step: index.step,
            config_hash: index.config_hash,
            adapter_spec: index.adapter_spec,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parses the header and index and returns them with the blob section.
fn split(bytes: &[u8]) -> Result<(CheckpointIndex, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format(
            "not a TVOOCKPT checkpoint (bad magic)".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint index".into()))?;
    let index: CheckpointIndex = serde_json::from_slice(&bytes[20..end])
        .map_err(|e| Error::Format(format!("bad checkpoint index: {e}")))?;
    if index.dtype != "f64" {
        return Err(Error::Format(format!(
            "unsupported checkpoint dtype {:?}",
            index.dtype
        )));
    }
    let payload = &bytes[end..];
    let total: usize = index
        .blobs
        .iter()
        .map(|b| b.shape.iter().product::<usize>())
        .sum();
    if payload.len() != 8 * total {
        return Err(Error::Format(format!(
            "checkpoint payload has {} bytes, index describes {}",
            payload.len(),
            8 * total
        )));
    }
    Ok((index, payload))
}

/// Reads only the index, for inspection.
pub fn read_index(path: &Path) -> Result<CheckpointIndex> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Ok(split(&bytes)?.0)
}
