//! Single-condition inference: checkpoint + condition image -> BEV
//! prediction, extracted points, and an optional sampler trace.

use std::path::Path;

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use radbev::consistency::one_step_generate;
use radbev::diffusion::{heun_sample_opts, TraceRow};
use radbev::geometry::{average_predictions, extract_points, BevImage};
use radbev::io::{self, load_checkpoint, ModelKind};

use super::dataset::write_points_csv;
use super::train::{load_distilled, load_teacher};
use crate::config::{derive_seed, ExperimentConfig};

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub condition: &'a Path,
    pub out: &'a Path,
    pub seed: u64,
    /// Average this many independently seeded predictions.
    pub averages: usize,
    pub threshold: f64,
    pub trace: bool,
}

pub fn run_infer(cfg: &ExperimentConfig, args: &InferArgs) -> anyhow::Result<()> {
    if args.averages == 0 {
        bail!("--avg must be >= 1");
    }
    std::fs::create_dir_all(args.out)?;
    let cond_img = io::read_bev::<f32>(args.condition)
        .with_context(|| format!("reading condition {}", args.condition.display()))?;
    let shape = cond_img.values.dim();
    let spec = cond_img.spec;

    let (header, _) = load_checkpoint::<f32>(args.checkpoint)?;
    let mut predictions = Vec::with_capacity(args.averages);
    let mut trace_rows: Vec<TraceRow> = Vec::new();

    match header.kind {
        ModelKind::Teacher => {
            let model = load_teacher(args.checkpoint, cfg)?;
            for i in 0..args.averages {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(args.seed, "infer", i as u64));
                let trace = if args.trace && i == 0 {
                    Some(&mut trace_rows)
                } else {
                    None
                };
                let mut x = heun_sample_opts(
                    &model,
                    Some(&cond_img.values),
                    shape,
                    &cfg.schedule,
                    &mut rng,
                    trace,
                    Some((0.0, 1.0)),
                )?;
                x.mapv_inplace(|v| v.clamp(0.0, 1.0));
                predictions.push(BevImage {
                    values: x,
                    spec,
                    frame_id: cond_img.frame_id,
                });
            }
        }
        ModelKind::Distilled => {
            let model = load_distilled(args.checkpoint, cfg)?;
            for i in 0..args.averages {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(args.seed, "infer", i as u64));
                let x = one_step_generate(
                    &model,
                    Some(&cond_img.values),
                    shape,
                    &cfg.schedule,
                    &mut rng,
                )?;
                predictions.push(BevImage {
                    values: x,
                    spec,
                    frame_id: cond_img.frame_id,
                });
            }
        }
    }

    let mean = average_predictions(&predictions)?;
    io::write_bev(&args.out.join("prediction.bev"), &mean)?;
    io::write_pgm(&args.out.join("prediction.pgm"), &mean.values)?;
    let cloud = extract_points(&mean, args.threshold as f32).cast::<f64>();
    write_points_csv(&args.out.join("prediction_points.csv"), &cloud)?;

    if args.trace && !trace_rows.is_empty() {
        let mut text = String::from("step,sigma,x_norm,denoised_norm\n");
        for r in &trace_rows {
            text.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.sigma, r.x_norm, r.denoised_norm
            ));
        }
        std::fs::write(args.out.join("sampler_trace.csv"), text)?;
    }
    println!(
        "wrote prediction ({} point{}) to {}",
        cloud.points.len(),
        if cloud.points.len() == 1 { "" } else { "s" },
        args.out.display()
    );
    Ok(())
}
