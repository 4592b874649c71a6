//! `tenvoo`: dataset generation, pretraining, adapter fine-tuning, sampling
//! and evaluation for desk-scale 3D diffusion experiments.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tenvoo::adapters::AdapterKind;
use tenvoo::experiment::{self as exp, Checkpoint, ExperimentConfig};
use tenvoo::metrics::SsimProtocol;

#[derive(Parser, Debug)]
#[command(
    name = "tenvoo",
    version,
    about = "Tensor-network adapters for 3D diffusion models"
)]
struct Cli {
    /// JSON experiment config; defaults apply to missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config (data, training, adapters, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over TENVOO_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sampling and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory written by gen-data (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes phantom volumes for every configured tag plus manifest.json.
    GenData,
    /// Trains the base model on the pretraining tag.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
        /// Continue from this checkpoint up to training.max_steps.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Attaches adapters to a pretrained checkpoint and trains them on the target tag.
    Finetune {
        #[command(flatten)]
        data: DataArg,
        /// Pretrained checkpoint (default: <out>/pretrain/pretrain.ckpt).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        kind: Option<AdapterKind>,
        #[arg(long)]
        rank: Option<usize>,
        /// Also train the non-adapted layers.
        #[arg(long)]
        joint: bool,
    },
    /// Draws volumes with seeds seed..seed+n-1.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of volumes (default: sampling.count).
        #[arg(short, long)]
        n: Option<usize>,
        /// Fold adapters into the kernels before sampling.
        #[arg(long)]
        merged: bool,
    },
    /// Compares two directories of volumes; writes eval.json and eval.csv.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Both)]
        protocol: ProtocolArg,
    },
    /// Fine-tunes, samples and evaluates once per rank.
    AblateRank {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 6])]
        ranks: Vec<usize>,
    },
    /// Prints adapter parameter counts per kind and rank without training.
    ParamCount {
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 6])]
        ranks: Vec<usize>,
        /// Adapter kinds (default: the 3D convolution adapters).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<AdapterKind>,
        #[arg(long)]
        json: bool,
    },
    /// Summarizes a checkpoint's index.
    InspectCheckpoint {
        path: PathBuf,
        /// Print the raw JSON index instead.
        #[arg(long)]
        json: bool,
    },
    /// Prints a published JSON schema (config, eval_report, manifest).
    #[command(hide = true)]
    Schema { name: String },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ProtocolArg {
    Pairwise,
    NearestReal,
    Both,
}

impl ProtocolArg {
    fn protocols(self) -> Vec<SsimProtocol> {
        match self {
            Self::Pairwise => vec![SsimProtocol::Pairwise],
            Self::NearestReal => vec![SsimProtocol::NearestReal],
            Self::Both => vec![SsimProtocol::Pairwise, SsimProtocol::NearestReal],
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.training.seed = s;
        cfg.adapter.seed = s;
        cfg.sampling.seed = s;
    }
    cfg.output_dir = match (&cli.out, std::env::var_os("TENVOO_OUT")) {
        (Some(o), _) => o.clone(),
        (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
        _ => cfg.output_dir,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig, arg: &DataArg) -> PathBuf {
    arg.data
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("data"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn base_checkpoint(cfg: &ExperimentConfig, base: &Option<PathBuf>) -> Result<Checkpoint> {
    let path = base
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("pretrain").join("pretrain.ckpt"));
    load_checkpoint(&path)
}

fn print_run(run: &exp::TrainOutcome) {
    let s = &run.summary;
    println!(
        "{}: {} steps, mean loss {:.5} -> {:.5} (first/last {} steps)",
        s.command,
        s.steps_run,
        s.initial_mean_loss,
        s.final_mean_loss,
        s.steps_run.min(50)
    );
    println!(
        "trainable {} | base {} | adapters {} ({:.2}% of base)",
        s.trainable_params,
        s.base_params,
        s.adapter_params,
        100.0 * s.adapter_fraction
    );
    println!("checkpoint {}", run.checkpoint_path.display());
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    if let Command::Schema { name } = &cli.command {
        let (_, schema) = exp::schemas()
            .into_iter()
            .find(|(n, _)| n == name)
            .with_context(|| format!("unknown schema {name}"))?;
        println!("{}", serde_json::to_string_pretty(&schema)?);
        return Ok(());
    }
    if let Command::InspectCheckpoint { path, json } = &cli.command {
        return inspect(path, *json);
    }
    let mut cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::GenData => {
            let dir = out.join("data");
            let m = exp::gen_data(&cfg, &dir)?;
            println!(
                "wrote {} volumes and {}",
                m.entries.len(),
                dir.join(exp::MANIFEST_NAME).display()
            );
        }
        Command::Pretrain { data, resume } => {
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            let run =
                exp::pretrain_from(&cfg, &data_dir(&cfg, data), &out.join("pretrain"), resume)?;
            print_run(&run);
        }
        Command::Finetune {
            data,
            base,
            kind,
            rank,
            joint,
        } => {
            if let Some(k) = kind {
                cfg.adapter.kind = *k;
            }
            if let Some(r) = rank {
                cfg.adapter.rank = *r;
            }
            cfg.adapter.joint |= *joint;
            cfg.validate()?;
            let base = base_checkpoint(&cfg, base)?;
            let run = exp::finetune(&cfg, &base, &data_dir(&cfg, data), &out.join("finetune"))?;
            print_run(&run);
        }
        Command::Sample {
            checkpoint,
            n,
            merged,
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let tag = if ck.model.has_adapters() {
                cfg.data.target_tag
            } else {
                cfg.data.pretrain_tag
            };
            let grid = cfg.data.phantom(tag)?.grid;
            let n = n.unwrap_or(cfg.sampling.count);
            let recs = exp::sample_volumes(&ck, grid, n, cfg.sampling.seed, *merged, tag)?;
            let paths = exp::write_samples(&out.join("samples"), &recs)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            real,
            gen,
            protocol,
        } => {
            let dir = out.join("eval");
            let s = exp::eval_dirs(real, gen, &cfg.eval, &protocol.protocols(), &dir)?;
            for r in s.rows() {
                println!("{:<8} {:<17} {:.6}", r.metric, r.protocol, r.value);
            }
            println!("report {}", dir.join("eval.json").display());
        }
        Command::AblateRank { data, base, ranks } => {
            let base = base_checkpoint(&cfg, base)?;
            let dir = out.join("ablate_rank");
            let rows = exp::ablate_rank(&cfg, &base, ranks, &data_dir(&cfg, data), &dir)?;
            println!(
                "{:>4} {:>8} {:>9} {:>10} {:>9}",
                "rank", "params", "ms_ssim", "mmd", "loss"
            );
            for r in rows {
                println!(
                    "{:>4} {:>8} {:>9.5} {:>10.3e} {:>9.5}",
                    r.rank, r.params, r.ms_ssim, r.mmd, r.loss
                );
            }
            println!("table {}", dir.join("ablate_rank.csv").display());
        }
        Command::ParamCount { ranks, kinds, json } => {
            let kinds = if kinds.is_empty() {
                AdapterKind::ALL
                    .iter()
                    .copied()
                    .filter(|&k| k.is_conv() && k != AdapterKind::Lora2d)
                    .collect()
            } else {
                kinds.clone()
            };
            let rows = exp::param_count_table(&cfg, &kinds, ranks)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                println!(
                    "{:<10} {:>4} {:>10} {:>10} {:>8}",
                    "kind", "rank", "adapter", "base", "percent"
                );
                for r in rows {
                    match r.adapter_params {
                        Some(p) => println!(
                            "{:<10} {:>4} {:>10} {:>10} {:>7.2}%",
                            r.kind.as_str(),
                            r.rank,
                            p,
                            r.base_params,
                            100.0 * p as f64 / r.base_params as f64
                        ),
                        None => println!(
                            "{:<10} {:>4} {:>10} {:>10} {:>8}",
                            r.kind.as_str(),
                            r.rank,
                            "n/a",
                            r.base_params,
                            "-"
                        ),
                    }
                }
            }
        }
        Command::InspectCheckpoint { .. } | Command::Schema { .. } => unreachable!(),
    }
    Ok(())
}

fn inspect(path: &Path, json: bool) -> Result<()> {
    let index = exp::read_index(path).with_context(|| format!("reading {}", path.display()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&index)?);
        return Ok(());
    }
    let count = |prefix: &str| -> usize {
        index
            .blobs
            .iter()
            .filter(|b| b.name.starts_with(prefix))
            .map(|b| b.shape.iter().product::<usize>())
            .sum()
    };
    let base = count("param/");
    let trainable_base: usize = index
        .blobs
        .iter()
        .filter(|b| {
            b.name
                .strip_prefix("param/")
                .is_some_and(|n| index.trainable.get(n).copied().unwrap_or(false))
        })
        .map(|b| b.shape.iter().product::<usize>())
        .sum();
    let adapter = count("adapter/");
    let frozen_cores: usize = index
        .blobs
        .iter()
        .filter(|b| b.name.starts_with("adapter/") && b.name.contains("/frozen/"))
        .map(|b| b.shape.iter().product::<usize>())
        .sum();
    println!("file        {}", path.display());
    println!(
        "format      {} v{} ({})",
        String::from_utf8_lossy(exp::CHECKPOINT_MAGIC),
        exp::CHECKPOINT_VERSION,
        index.dtype
    );
    println!("step        {}", index.step);
    println!("config      {}", index.config_hash);
    println!(
        "model       widths {:?}, time_dim {}",
        index.model.widths, index.model.time_dim
    );
    println!(
        "diffusion   T={} beta {}..{}",
        index.diffusion.steps, index.diffusion.beta_start, index.diffusion.beta_end
    );
    match &index.adapter_spec {
        Some(a) => println!(
            "adapters    {} rank {} on {} layers{}",
            a.kind,
            a.rank,
            index.adapters.len(),
            if a.joint { " (joint)" } else { "" }
        ),
        None => println!("adapters    none"),
    }
    println!("base params {base} ({trainable_base} trainable)");
    println!(
        "adapter     {} trainable, {} frozen copy",
        adapter - frozen_cores,
        frozen_cores
    );
    let opt = match &index.optimizer {
        exp::OptimizerMeta::Adam { lr, .. } => format!("adam lr {lr}"),
        exp::OptimizerMeta::Sgd { lr } => format!("sgd lr {lr}"),
    };
    println!("optimizer   {opt}");
    println!("blobs       {}", index.blobs.len());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
