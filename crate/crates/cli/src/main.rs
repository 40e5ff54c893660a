use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use radbev_cli::config::ExperimentConfig;
use radbev_cli::pipeline::{
    build_dataset, load_dataset, run_benchmark, run_distillation, run_infer, run_training,
    DatasetManifest, InferArgs,
};

#[derive(Parser)]
#[command(
    name = "radbev",
    about = "Synthetic FMCW radar to BEV point clouds: dataset generation, diffusion training, consistency distillation, CFAR baselines, benchmarking"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output/run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Dataset,
    /// Train the teacher denoiser on the train split.
    Train,
    /// Distill the teacher into a one-step consistency model.
    Distill,
    /// Score methods on the test split and write report files.
    Bench {
        /// Subset of {oscfar, teacher_edm, distilled_cd}; default from config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Predict a BEV image from one condition file.
    Infer {
        /// Checkpoint produced by `train` or `distill`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Condition image (`.bev` tensor written by `dataset`).
        #[arg(long)]
        cond: PathBuf,
        /// Average this many independently seeded predictions.
        #[arg(long, default_value_t = 1)]
        avg: usize,
        /// Occupancy threshold for point extraction.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the per-step sampler trace CSV (teacher checkpoints).
        #[arg(long, default_value_t = false)]
        trace: bool,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli
        .config
        .clone()
        .context("--config <path> is required for this subcommand")?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }

    match &cli.command {
        Command::Dataset => {
            let cfg = load_config(&cli)?;
            let out = PathBuf::from(&cfg.out_dir);
            std::fs::create_dir_all(&out)?;
            let manifest = build_dataset(&cfg, &out)?;
            let train = manifest
                .frames
                .iter()
                .filter(|f| f.split == radbev_cli::pipeline::Split::Train)
                .count();
            println!(
                "dataset: {} frames ({} train / {} test) under {}",
                manifest.frames.len(),
                train,
                manifest.frames.len() - train,
                out.display()
            );
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let out = PathBuf::from(&cfg.out_dir);
            let manifest = DatasetManifest::load(&out.join("manifest.json"))?;
            let data = load_dataset(&manifest, &out)?;
            let summary = run_training(&cfg, &manifest, &data, &out)?;
            if let (Some(first), Some(last)) = (summary.log.first(), summary.log.last()) {
                println!(
                    "trained {} steps: val loss {:.5} -> {:.5}; checkpoint {}",
                    last.step,
                    first.val_loss,
                    last.val_loss,
                    summary.checkpoint.display()
                );
            }
        }
        Command::Distill => {
            let cfg = load_config(&cli)?;
            let out = PathBuf::from(&cfg.out_dir);
            let manifest = DatasetManifest::load(&out.join("manifest.json"))?;
            let data = load_dataset(&manifest, &out)?;
            let summary =
                run_distillation(&cfg, &out.join("teacher.ckpt"), &manifest, &data, &out)?;
            if let (Some(first), Some(last)) = (summary.log.first(), summary.log.last()) {
                println!(
                    "distilled {} steps: loss {:.5} -> {:.5}; checkpoint {}",
                    last.step,
                    first.train_loss,
                    last.train_loss,
                    summary.checkpoint.display()
                );
            }
        }
        Command::Bench { methods } => {
            let mut cfg = load_config(&cli)?;
            if let Some(methods) = methods {
                cfg.bench.methods = methods.clone();
                cfg.validate()?;
            }
            let out = PathBuf::from(&cfg.out_dir);
            let manifest = DatasetManifest::load(&out.join("manifest.json"))?;
            let outcome = run_benchmark(&cfg, &manifest, &out, &out)?;
            println!("method            frames  excl  mean CD    mean HD    F-score");
            for r in &outcome.reports {
                println!(
                    "{:<17} {:>6} {:>5}  {:<9} {:<9} {:.4}",
                    r.method,
                    r.frames,
                    r.excluded,
                    r.mean_cd.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
                    r.mean_hd.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
                    r.mean_fscore
                );
            }
            println!("reports under {}", out.join("bench").display());
        }
        Command::Infer {
            ckpt,
            cond,
            avg,
            threshold,
            trace,
        } => {
            let cfg = load_config(&cli)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("infer"));
            run_infer(
                &cfg,
                &InferArgs {
                    checkpoint: ckpt,
                    condition: cond,
                    out: &out,
                    seed: cli.seed.unwrap_or(cfg.seed),
                    averages: *avg,
                    threshold: *threshold,
                    trace: *trace,
                },
            )?;
        }
    }
    Ok(())
}
