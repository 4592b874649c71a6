use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checkpoint, ExperimentConfig, TrainerOptimizer, TrainingConfig};
use crate::adapters::AdapterKind;
use crate::autodiff::{Optimizer, Parameterized};
use crate::data::{
    from_model_sample, generate_phantom, make_split, read_volume, to_model_batch, write_volume,
    DatasetTag, VolumeRecord,
};
use crate::ddpm::{sample, train_step, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricReport, SsimProtocol};
use crate::nn::{AdapterSpec, AttachReport, UNetLite};
use crate::tensor::DenseTensor;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const VOLUME_EXT: &str = "tvol";

fn mkdirs(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub tag: DatasetTag,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// SHA-256 of the data section that produced these files.
    pub data_hash: String,
    pub entries: Vec<ManifestEntry>,
}

/// Seed of the `i`-th volume of a tag: tags occupy disjoint 2³² blocks.
pub fn record_seed(base: u64, tag: DatasetTag, i: usize) -> u64 {
    let block = DatasetTag::ALL
        .iter()
        .position(|&t| t == tag)
        .expect("known tag") as u64;
    base.wrapping_add(block << 32).wrapping_add(i as u64)
}

/// Writes `count` volumes per configured tag plus `manifest.json` into `data_dir`.
pub fn gen_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Manifest> {
    cfg.data.validate()?;
    let mut entries = Vec::new();
    for phantom in &cfg.data.phantoms {
        let tag = phantom.tag;
        let dir = data_dir.join(tag.as_str());
        mkdirs(&dir)?;
        let (train, _) = make_split(
            (0..cfg.data.count).collect::<Vec<_>>(),
            cfg.data.split,
            record_seed(cfg.data.seed, tag, u32::MAX as usize),
        )?;
        for i in 0..cfg.data.count {
            let seed = record_seed(cfg.data.seed, tag, i);
            let rec = generate_phantom(phantom, seed)?;
            let name = format!("{tag}_{i:04}.{VOLUME_EXT}");
            write_volume(&dir.join(&name), &rec)?;
            entries.push(ManifestEntry {
                path: format!("{tag}/{name}"),
                tag,
                seed,
                split: if train.contains(&i) {
                    Split::Train
                } else {
                    Split::Eval
                },
            });
        }
    }
    let manifest = Manifest {
        data_hash: hex::encode(Sha256::digest(serde_json::to_vec(&cfg.data)?)),
        entries,
    };
    write_json(&data_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(data_dir: &Path) -> Result<Manifest> {
    let path = data_dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::InvalidConfig(format!(
            "missing data: cannot read {} ({e}); run gen-data first",
            path.display()
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Volumes of one tag, optionally restricted to one side of the split.
pub fn load_records(
    data_dir: &Path,
    tag: DatasetTag,
    split: Option<Split>,
) -> Result<Vec<VolumeRecord>> {
    let manifest = read_manifest(data_dir)?;
    let records: Vec<VolumeRecord> = manifest
        .entries
        .iter()
        .filter(|e| e.tag == tag && split.is_none_or(|s| s == e.split))
        .map(|e| read_volume(&data_dir.join(&e.path)))
        .collect::<Result<_>>()?;
    if records.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "missing data: no {tag} volumes in {}",
            data_dir.display()
        )));
    }
    Ok(records)
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn step_rng(seed: u64, step: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(
        seed ^ step.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    )
}

/// Runs optimizer steps `start..tc.max_steps` on volumes drawn from `records`.
pub fn train_loop(
    model: &mut UNetLite,
    optimizer: &mut TrainerOptimizer,
    records: &[VolumeRecord],
    tc: &TrainingConfig,
    schedule: &DiffusionSchedule,
    start: u64,
) -> Result<Vec<StepRow>> {
    tc.validate("training")?;
    if records.is_empty() {
        return Err(Error::InvalidConfig("no training volumes".into()));
    }
    let mut rows = Vec::new();
    for k in start..tc.max_steps as u64 {
        let mut rng = step_rng(tc.seed, k);
        let micro: Vec<DenseTensor> = (0..tc.accumulation)
            .map(|_| {
                let picks: Vec<&DenseTensor> = (0..tc.batch_size)
                    .map(|_| &records[rng.gen_range(0..records.len())].voxels)
                    .collect();
                to_model_batch(&picks)
            })
            .collect::<Result<_>>()?;
        let stats = train_step(model, &micro, schedule, &mut rng, optimizer, tc.grad_clip)
            .map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!(
                    "step {}: {msg}; try a smaller training.lr (now {}) or set training.grad_clip",
                    k + 1,
                    tc.lr
                )),
                other => other,
            })?;
        rows.push(StepRow {
            step: k + 1,
            loss: stats.loss,
            lr: optimizer.learning_rate(),
            grad_norm: stats.grad_norm,
        });
        if (k + 1) % 10 == 0 || k + 1 == tc.max_steps as u64 {
            log::info!("step {}/{} loss {:.5}", k + 1, tc.max_steps, stats.loss);
        }
    }
    Ok(rows)
}

pub fn write_loss_csv(path: &Path, rows: &[StepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, bytes)
}

/// Mean of the first / last `window` losses.
pub fn loss_window(rows: &[StepRow], window: usize, last: bool) -> f64 {
    let w = window.min(rows.len()).max(1);
    let slice = if last {
        &rows[rows.len().saturating_sub(w)..]
    } else {
        &rows[..w.min(rows.len())]
    };
    slice.iter().map(|r| r.loss).sum::<f64>() / slice.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub steps_run: usize,
    pub final_step: u64,
    pub initial_mean_loss: f64,
    pub final_mean_loss: f64,
    pub base_params: usize,
    pub trainable_params: usize,
    pub adapter_params: usize,
    pub adapter_fraction: f64,
    pub attach: Option<AttachReport>,
    pub config_hash: String,
    /// Wall-clock; the only field that differs between identical runs.
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub rows: Vec<StepRow>,
    pub summary: RunSummary,
}

const SUMMARY_WINDOW: usize = 50;

fn finish_run(
    name: &str,
    out_dir: &Path,
    checkpoint: Checkpoint,
    rows: Vec<StepRow>,
    attach: Option<AttachReport>,
    started: Instant,
) -> Result<TrainOutcome> {
    mkdirs(out_dir)?;
    let checkpoint_path = out_dir.join(format!("{name}.ckpt"));
    checkpoint.save(&checkpoint_path)?;
    write_loss_csv(&out_dir.join(format!("{name}_loss.csv")), &rows)?;
    let m = &checkpoint.model;
    let base = m.base_param_count();
    let adapter = m.adapter_param_count();
    let summary = RunSummary {
        command: name.into(),
        steps_run: rows.len(),
        final_step: checkpoint.step,
        initial_mean_loss: loss_window(&rows, SUMMARY_WINDOW, false),
        final_mean_loss: loss_window(&rows, SUMMARY_WINDOW, true),
        base_params: base,
        trainable_params: m.num_trainable(),
        adapter_params: adapter,
        adapter_fraction: adapter as f64 / base as f64,
        attach,
        config_hash: checkpoint.config_hash.clone(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join(format!("{name}_summary.json")), &summary)?;
    Ok(TrainOutcome {
        checkpoint,
        checkpoint_path,
        rows,
        summary,
    })
}

/// Trains the base model on the training split of `data.pretrain_tag`.
pub fn pretrain(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    pretrain_from(cfg, data_dir, out_dir, None)
}

/// [`pretrain`], continuing `resume` up to `training.max_steps` when given.
pub fn pretrain_from(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let records = load_records(data_dir, cfg.data.pretrain_tag, Some(Split::Train))?;
    let schedule = cfg.diffusion.schedule()?;
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            if ck.model.config != cfg.model || ck.diffusion != cfg.diffusion {
                return Err(Error::InvalidConfig(
                    "resume checkpoint was trained with a different model or diffusion section"
                        .into(),
                ));
            }
            if ck.model.has_adapters() {
                return Err(Error::InvalidConfig(
                    "cannot resume pretraining from a fine-tuned checkpoint".into(),
                ));
            }
            (ck.model, ck.optimizer, ck.step)
        }
        None => (
            UNetLite::new(cfg.model.clone(), cfg.diffusion.steps, cfg.training.seed)?,
            TrainerOptimizer::new(cfg.training.optimizer, cfg.training.lr),
            0,
        ),
    };
    let rows = train_loop(
        &mut model,
        &mut opt,
        &records,
        &cfg.training,
        &schedule,
        start,
    )?;
    let checkpoint = Checkpoint {
        model,
        diffusion: cfg.diffusion.clone(),
        optimizer: opt,
        step: cfg.training.max_steps as u64,
        config_hash: cfg.hash(),
        adapter_spec: None,
    };
    finish_run("pretrain", out_dir, checkpoint, rows, None, started)
}

/// Attaches adapters to a pretrained model and trains them on `data.target_tag`.
///
/// In adapter mode every base weight is checked bit-for-bit before saving.
pub fn finetune(
    cfg: &ExperimentConfig,
    base: &Checkpoint,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    if base.model.has_adapters() {
        return Err(Error::InvalidConfig(
            "base checkpoint already carries adapters".into(),
        ));
    }
    if base.model.config != cfg.model || base.diffusion != cfg.diffusion {
        return Err(Error::InvalidConfig(
            "base checkpoint was trained with a different model or diffusion section".into(),
        ));
    }
    let records = load_records(data_dir, cfg.data.target_tag, Some(Split::Train))?;
    let schedule = cfg.diffusion.schedule()?;
    let mut model = base.model.clone();
    model.set_all_trainable(true);
    let report = model.attach_adapters(&cfg.adapter)?;
    log::info!(
        "attached {} adapters: {} trainable of {} base parameters",
        report.layers.len(),
        report.trainable_params,
        report.base_params
    );
    let before = model.base_params();
    let mut opt = TrainerOptimizer::new(cfg.training.optimizer, cfg.training.lr);
    let rows = train_loop(&mut model, &mut opt, &records, &cfg.training, &schedule, 0)?;
    if !cfg.adapter.joint {
        let after = model.base_params();
        for (name, t) in &before {
            let same = after[name]
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Gradient(format!(
                    "frozen base weight {name} changed during fine-tuning"
                )));
            }
        }
    }
    let checkpoint = Checkpoint {
        model,
        diffusion: cfg.diffusion.clone(),
        optimizer: opt,
        step: cfg.training.max_steps as u64,
        config_hash: cfg.hash(),
        adapter_spec: Some(cfg.adapter.clone()),
    };
    finish_run("finetune", out_dir, checkpoint, rows, Some(report), started)
}

#[cfg(feature = "parallel")]
fn map_seeds<T: Send>(
    seeds: Vec<u64>,
    f: impl Fn(u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    seeds.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_seeds<T: Send>(
    seeds: Vec<u64>,
    f: impl Fn(u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    seeds.into_iter().map(f).collect()
}

/// `n` volumes of extent `grid` with seeds `seed..seed + n`, values rounded to f32.
///
/// `merged` folds adapters into the kernels first.
pub fn sample_volumes(
    checkpoint: &Checkpoint,
    grid: [usize; 3],
    n: usize,
    seed: u64,
    merged: bool,
    tag: DatasetTag,
) -> Result<Vec<VolumeRecord>> {
    let model = if merged {
        checkpoint.model.merged()?
    } else {
        checkpoint.model.clone()
    };
    let schedule = checkpoint.diffusion.schedule()?;
    let shape = [1, model.config.in_channels, grid[0], grid[1], grid[2]];
    model.check_input(&shape)?;
    map_seeds((0..n as u64).map(|i| seed.wrapping_add(i)).collect(), |s| {
        let x = sample(&model, &schedule, &shape, s)?;
        Ok(VolumeRecord {
            voxels: from_model_sample(&x)?.map(|v| v as f32 as f64),
            tag,
            seed: s,
        })
    })
}

pub fn sample_file_name(seed: u64) -> String {
    format!("sample_{seed:06}.{VOLUME_EXT}")
}

pub fn write_samples(dir: &Path, records: &[VolumeRecord]) -> Result<Vec<PathBuf>> {
    mkdirs(dir)?;
    records
        .iter()
        .map(|r| {
            let p = dir.join(sample_file_name(r.seed));
            write_volume(&p, r)?;
            Ok(p)
        })
        .collect()
}

/// Every `.tvol` file in `dir`, in file-name order.
pub fn read_volume_dir(dir: &Path) -> Result<Vec<VolumeRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == VOLUME_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .{VOLUME_EXT} volumes in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_volume(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    /// One report per MS-SSIM protocol.
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub protocol: String,
    pub value: f64,
}

impl EvalSummary {
    /// One row per (metric, protocol) pair.
    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |m: &str, p: &str, v: f64| MetricRow {
            metric: m.into(),
            protocol: p.into(),
            value: v,
        };
        let mut rows: Vec<MetricRow> = self
            .reports
            .iter()
            .map(|r| row("ms_ssim", r.ms_ssim_protocol.as_str(), r.ms_ssim))
            .collect();
        if let Some(r) = self.reports.first() {
            rows.push(row("mmd", "unbiased-clamped", r.mmd));
            rows.push(row("mse", "nearest-real", r.mse));
        }
        rows
    }
}

/// Metrics of `generated` against `real` under each protocol.
pub fn evaluate_sets(
    real: &[DenseTensor],
    generated: &[DenseTensor],
    opts: &EvalOptions,
    protocols: &[SsimProtocol],
) -> Result<EvalSummary> {
    let reports = protocols
        .iter()
        .map(|&protocol| {
            evaluate(
                real,
                generated,
                &EvalOptions {
                    protocol,
                    ..opts.clone()
                },
            )
        })
        .collect::<Result<_>>()?;
    Ok(EvalSummary { reports })
}

/// Evaluates two volume directories and writes `eval.json` and `eval.csv`.
pub fn eval_dirs(
    real_dir: &Path,
    gen_dir: &Path,
    opts: &EvalOptions,
    protocols: &[SsimProtocol],
    out_dir: &Path,
) -> Result<EvalSummary> {
    let real: Vec<DenseTensor> = read_volume_dir(real_dir)?
        .into_iter()
        .map(|r| r.voxels)
        .collect();
    let generated: Vec<DenseTensor> = read_volume_dir(gen_dir)?
        .into_iter()
        .map(|r| r.voxels)
        .collect();
    let summary = evaluate_sets(&real, &generated, opts, protocols)?;
    mkdirs(out_dir)?;
    write_json(&out_dir.join("eval.json"), &summary)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in summary.rows() {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    write_file(
        &out_dir.join("eval.csv"),
        w.into_inner().map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rank: usize,
    pub params: usize,
    pub ms_ssim: f64,
    pub mmd: f64,
    pub loss: f64,
}

/// Fine-tunes, samples and evaluates once per rank; writes `ablate_rank.csv`.
pub fn ablate_rank(
    cfg: &ExperimentConfig,
    base: &Checkpoint,
    ranks: &[usize],
    data_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if ranks.is_empty() {
        return Err(Error::InvalidConfig(
            "ablate-rank needs at least one rank".into(),
        ));
    }
    let target = cfg.data.target_tag;
    let real: Vec<DenseTensor> = load_records(data_dir, target, None)?
        .into_iter()
        .map(|r| r.voxels)
        .collect();
    let grid = cfg.data.phantom(target)?.grid;
    let mut rows = Vec::new();
    for &rank in ranks {
        let mut c = cfg.clone();
        c.adapter.rank = rank;
        let dir = out_dir.join(format!("rank_{rank}"));
        let run = finetune(&c, base, data_dir, &dir)?;
        let samples = sample_volumes(
            &run.checkpoint,
            grid,
            cfg.sampling.count,
            cfg.sampling.seed,
            false,
            target,
        )?;
        let generated: Vec<DenseTensor> = samples.into_iter().map(|r| r.voxels).collect();
        let report = evaluate(&real, &generated, &cfg.eval)?;
        rows.push(AblationRow {
            rank,
            params: run.summary.adapter_params,
            ms_ssim: report.ms_ssim,
            mmd: report.mmd,
            loss: loss_window(&run.rows, 10, true),
        });
    }
    mkdirs(out_dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    write_file(
        &out_dir.join("ablate_rank.csv"),
        w.into_inner().map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub kind: AdapterKind,
    pub rank: usize,
    /// `None` when the adapter kind cannot wrap these layers.
    pub adapter_params: Option<usize>,
    pub base_params: usize,
}

/// Adapter sizes over the configured targets for each kind and rank, without training.
pub fn param_count_table(
    cfg: &ExperimentConfig,
    kinds: &[AdapterKind],
    ranks: &[usize],
) -> Result<Vec<ParamCountRow>> {
    let base = UNetLite::new(cfg.model.clone(), cfg.diffusion.steps, 0)?;
    let base_params = base.base_param_count();
    let mut rows = Vec::new();
    for &kind in kinds {
        for &rank in ranks {
            let spec = AdapterSpec {
                kind,
                rank,
                ..cfg.adapter.clone()
            };
            let adapter_params = match base.clone().attach_adapters(&spec) {
                Ok(r) => Some(r.adapter_params),
                // LoRA-2D only wraps depth-1 kernels; the U-Net's are 3D.
                Err(Error::ShapeMismatch(_)) if kind == AdapterKind::Lora2d => None,
                Err(e) => return Err(e),
            };
            rows.push(ParamCountRow {
                kind,
                rank,
                adapter_params,
                base_params,
            });
        }
    }
    Ok(rows)
}

/// Total parameter count of a checkpoint's model, for reporting.
pub fn model_param_count(model: &UNetLite) -> usize {
    model.num_params()
}
