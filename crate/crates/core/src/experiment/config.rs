use std::path::PathBuf;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterKind;
use crate::data::{DatasetTag, PhantomConfig};
use crate::ddpm::{make_schedule, DiffusionSchedule, ScheduleShape};
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::nn::{AdapterSpec, UNetConfig};

fn invalid<T>(field: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::InvalidConfig(format!("{field}: {msg}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default = "linear")]
    pub schedule: ScheduleShape,
}

fn linear() -> ScheduleShape {
    ScheduleShape::Linear
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleShape::Linear,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.schedule)
            .or_else(|e| invalid("diffusion", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    /// Volumes per micro-batch.
    #[serde(default = "one")]
    pub batch_size: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn one() -> usize {
    1
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            accumulation: 4,
            batch_size: 1,
            max_steps: 200,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(
                &format!("{section}.lr"),
                format!("must be positive, got {}", self.lr),
            );
        }
        if self.accumulation == 0 {
            return invalid(&format!("{section}.accumulation"), "must be at least 1");
        }
        if self.batch_size == 0 {
            return invalid(&format!("{section}.batch_size"), "must be at least 1");
        }
        if self.max_steps == 0 {
            return invalid(&format!("{section}.max_steps"), "must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return invalid(
                    &format!("{section}.grad_clip"),
                    format!("must be positive, got {c}"),
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Volumes generated per tag.
    pub count: usize,
    /// Fraction of each tag used for training.
    pub split: f64,
    #[serde(default)]
    pub seed: u64,
    /// Dataset the base model is pretrained on.
    pub pretrain_tag: DatasetTag,
    /// Shifted dataset used for fine-tuning and evaluation.
    pub target_tag: DatasetTag,
    /// One generator config per tag to produce.
    pub phantoms: Vec<PhantomConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 10,
            split: 0.9,
            seed: 0,
            pretrain_tag: DatasetTag::Pretrain,
            target_tag: DatasetTag::ShiftA,
            phantoms: DatasetTag::ALL
                .iter()
                .map(|&t| PhantomConfig::new(t, 32))
                .collect(),
        }
    }
}

impl DataConfig {
    pub fn phantom(&self, tag: DatasetTag) -> Result<&PhantomConfig> {
        self.phantoms
            .iter()
            .find(|p| p.tag == tag)
            .ok_or_else(|| Error::InvalidConfig(format!("data.phantoms: no entry for tag {tag}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return invalid("data.count", "must be at least 1");
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return invalid(
                "data.split",
                format!("must be in (0, 1), got {}", self.split),
            );
        }
        for (i, p) in self.phantoms.iter().enumerate() {
            if self.phantoms[..i].iter().any(|q| q.tag == p.tag) {
                return invalid("data.phantoms", format!("tag {} listed twice", p.tag));
            }
            p.validate()
                .or_else(|e| invalid(&format!("data.phantoms[{i}]"), e))?;
        }
        self.phantom(self.pretrain_tag)?;
        self.phantom(self.target_tag)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { count: 4, seed: 0 }
    }
}

/// Everything a run needs; loaded from JSON with unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default = "default_adapter")]
    pub adapter: AdapterSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_adapter() -> AdapterSpec {
    AdapterSpec::new(AdapterKind::TenvooL, 4)
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            diffusion: DiffusionConfig::default(),
            adapter: default_adapter(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalOptions::default(),
            output_dir: default_output(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().or_else(|e| invalid("model", e))?;
        self.diffusion.schedule()?;
        let a = &self.adapter;
        if a.rank == 0 {
            return invalid("adapter.rank", "must be at least 1");
        }
        if !a.kind.is_conv() {
            return invalid(
                "adapter.kind",
                format!("{} is not a convolution adapter", a.kind),
            );
        }
        if !(a.scaling.is_finite()) {
            return invalid("adapter.scaling", "must be finite");
        }
        if a.targets.is_empty() {
            return invalid("adapter.targets", "must name at least one target");
        }
        self.training.validate("training")?;
        self.data.validate()?;
        for p in &self.data.phantoms {
            if p.grid.iter().any(|d| d % self.model.divisor() != 0) {
                return invalid(
                    "data.phantoms",
                    format!(
                        "grid {:?} for {} must be divisible by {} for this model",
                        p.grid,
                        p.tag,
                        self.model.divisor()
                    ),
                );
            }
        }
        if self.sampling.count == 0 {
            return invalid("sampling.count", "must be at least 1");
        }
        self.eval
            .ms_ssim
            .validate()
            .or_else(|e| invalid("eval.ms_ssim", e))?;
        let need = self.eval.ms_ssim.min_extent();
        let target = self.data.phantom(self.data.target_tag)?;
        if target.grid.iter().any(|&d| d < need) {
            return invalid(
                "eval.ms_ssim",
                format!("{} target volumes {:?} are smaller than the {need} voxels per axis MS-SSIM needs", target.tag, target.grid),
            );
        }
        if self.eval.max_pairs == 0 {
            return invalid("eval.max_pairs", "must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
