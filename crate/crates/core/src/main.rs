use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use scenenet::alloc::TrackingAllocator;
use scenenet::checkpoint::Checkpoint;
use scenenet::data::{export_synthetic_dataset, CameraParams, DatasetConfig, SyntheticSceneConfig};
use scenenet::harness::{
    benchmark_speed, emit_scatter, evaluate, infer_file, train, DepthProtocol, EvalOptions, ForegroundSource,
    RunConfig,
};
use scenenet::network::{build_single_task_model, Task};

#[global_allocator]
static GLOBAL: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(version, about = "Joint semantic, instance and depth prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        /// Dataset config; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Pool per-car depth over ground-truth masks (default).
        #[arg(long, conflicts_with = "pred_mask_depth")]
        gt_mask_depth: bool,
        /// Pool per-car depth over predicted car masks.
        #[arg(long)]
        pred_mask_depth: bool,
        /// Cluster ground-truth instance pixels instead of predicted ones.
        #[arg(long)]
        gt_fg: bool,
        /// Directory for the report and the per-car CSV.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Predict one image and write the output maps.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Network input size HxW; outputs are resampled to the image size.
        #[arg(long, value_parser = parse_hw)]
        resize: Option<(usize, usize)>,
    },
    /// Compare joint and single-task forward latency.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Semantic, instance and depth checkpoints; built from the joint
        /// config when omitted.
        #[arg(long, value_delimiter = ',')]
        single_ckpts: Vec<PathBuf>,
        #[arg(long, value_parser = parse_hw)]
        res: (usize, usize),
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Scatter plot (SVG) of ground-truth against predicted car depth.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with a matching run config.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s}"))?;
    Ok((h, w))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train(&cfg)?;
            println!(
                "trained {} steps; last {}, best {} (val {:.4} at step {})",
                outcome.log.len(),
                outcome.last_checkpoint.display(),
                outcome.best_checkpoint.display(),
                outcome.best_value,
                outcome.best_step
            );
        }
        Command::Eval {
            ckpt,
            split,
            dataset,
            gt_mask_depth: _,
            pred_mask_depth,
            gt_fg,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds_path = match dataset {
                Some(p) => p,
                None => ck
                    .metadata
                    .get("dataset_config")
                    .map(PathBuf::from)
                    .ok_or_else(|| anyhow!("checkpoint records no dataset; pass --dataset"))?,
            };
            let ds = DatasetConfig::load(&ds_path)?;
            let samples = ds.load_split(&split)?;
            let mut opts = EvalOptions::for_checkpoint(&ck);
            if pred_mask_depth {
                opts.depth_protocol = DepthProtocol::PredMask;
            }
            if gt_fg {
                opts.foreground = ForegroundSource::GroundTruth;
            }
            let report = evaluate(&ck.to_model()?, &samples, &ds, &opts)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let md = report.to_markdown();
            fs::write(out.join("report.md"), &md)?;
            let kv: String = report
                .to_key_values()
                .into_iter()
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            fs::write(out.join("report.txt"), kv)?;
            report.write_car_pairs(&out.join("car_pairs.csv"))?;
            print!("{md}");
        }
        Command::Infer {
            ckpt,
            image,
            out,
            resize,
        } => {
            let o = infer_file(&ckpt, &image, &out, resize)?;
            println!(
                "wrote {}, {}, {}, {} and {} masks",
                o.semantic_png.display(),
                o.instance_png.display(),
                o.depth_png.display(),
                o.submission_txt.display(),
                o.mask_pngs.len()
            );
        }
        Command::Bench {
            ckpt,
            single_ckpts,
            res,
            iters,
            warmup,
        } => {
            let joint = Checkpoint::load(&ckpt)?.to_model()?;
            let singles = if single_ckpts.is_empty() {
                Task::ALL
                    .iter()
                    .map(|&t| build_single_task_model(&joint.config, t, 0))
                    .collect::<std::result::Result<Vec<_>, _>>()?
            } else {
                if single_ckpts.len() != 3 {
                    bail!("--single-ckpts takes exactly three checkpoints");
                }
                single_ckpts
                    .iter()
                    .map(|p| Checkpoint::load(p).and_then(|c| c.to_model()))
                    .collect::<std::result::Result<Vec<_>, _>>()?
            };
            let report = benchmark_speed(&joint, &singles, res.0, res.1, iters, warmup)?;
            print!("{}", report.to_markdown());
        }
        Command::Plot { csv, out } => {
            let n = emit_scatter(&csv, &out)?;
            println!("plotted {n} cars to {}", out.display());
        }
        Command::MakeToy { out, n, seed } => make_toy(&out, n, seed)?,
    }
    Ok(())
}

fn make_toy(out: &Path, n: usize, seed: u64) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let base = SyntheticSceneConfig {
        rng_seed: seed,
        ..Default::default()
    };
    export_synthetic_dataset(out, "train", n, &base, CameraParams::typical_cityscapes())?;
    let run = RunConfig::toy("dataset.toml", "run", n.min(10));
    run.save(&out.join("run.toml"))?;
    println!(
        "wrote {n} scenes to {}; train with `scenenet train --config {}`",
        out.join("train").display(),
        out.join("run.toml").display()
    );
    Ok(())
}
