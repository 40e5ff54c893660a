//! Teacher training and consistency distillation drivers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radbev::consistency::{distill_step, ConsistencyModel};
use radbev::denoiser::{eval_loss, train_step, EdmDenoiser};
use radbev::io::{load_checkpoint, save_checkpoint, CheckpointHeader, ModelKind};
use radbev::nn::{Adam, FeatureNet, TinyUNet};

use super::dataset::{DatasetManifest, LoadedDataset};
use crate::config::{derive_seed, ExperimentConfig};

#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<LogRow>,
}

fn write_log_csv(path: &Path, log: &[LogRow]) -> anyhow::Result<()> {
    let mut text = String::from("step,train_loss,val_loss\n");
    for row in log {
        text.push_str(&format!("{},{},{}\n", row.step, row.train_loss, row.val_loss));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn pick_batch<'a>(
    data: &'a LoadedDataset,
    idx_pool: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(&'a Array2<f32>, &'a Array2<f32>)> {
    (0..batch_size)
        .map(|_| {
            let i = idx_pool[rng.random_range(0..idx_pool.len())];
            (&data.bev[i], &data.cond[i])
        })
        .collect()
}

fn val_batch(
    data: &LoadedDataset,
    cap: usize,
) -> Vec<(&Array2<f32>, &Array2<f32>)> {
    data.test_idx
        .iter()
        .take(cap)
        .map(|&i| (&data.bev[i], &data.cond[i]))
        .collect()
}

/// Train the teacher denoiser and write `teacher.ckpt` under `out`.
pub fn run_training(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    data: &LoadedDataset,
    out: &Path,
) -> anyhow::Result<TrainSummary> {
    if data.train_idx.is_empty() {
        bail!("no training frames in manifest");
    }
    let unet_cfg = cfg.model.unet_config(manifest.bev.height);
    let net = TinyUNet::<f32>::new(unet_cfg.clone(), derive_seed(cfg.seed, "init", 0))?;
    let mut model = EdmDenoiser::new(net, cfg.schedule.sigma_data);
    let mut opt = Adam::new(&model.net.params, cfg.training.learning_rate);
    let fp = FeatureNet::<f32>::shipped();
    let weights = cfg.training.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train", 0));

    let ckpt_path = out.join("teacher.ckpt");
    let header = |step: u64| CheckpointHeader {
        kind: ModelKind::Teacher,
        seed: cfg.seed,
        step,
        schedule_hash: cfg.schedule.hash(),
        net: unet_cfg.clone(),
    };

    let vbatch = val_batch(data, 16);
    let mut log = Vec::new();
    let eval = |model: &EdmDenoiser<f32>| -> anyhow::Result<f64> {
        let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "val", 0));
        Ok(eval_loss(model, &fp, &vbatch, &cfg.schedule, &weights, &mut vrng)? as f64)
    };

    let mut window_loss = 0.0f64;
    let mut window_n = 0usize;
    for step in 0..cfg.training.steps {
        let batch = pick_batch(data, &data.train_idx, cfg.training.batch_size, &mut rng);
        let loss = train_step(&mut model, &mut opt, &fp, &batch, &cfg.schedule, &weights, &mut rng)
            .with_context(|| format!("training step {step}"))?;
        window_loss += loss as f64;
        window_n += 1;
        let last = step + 1 == cfg.training.steps;
        if (step + 1) % cfg.training.log_every == 0 || last {
            let val = eval(&model)?;
            log.push(LogRow {
                step: step + 1,
                train_loss: window_loss / window_n as f64,
                val_loss: val,
            });
            window_loss = 0.0;
            window_n = 0;
        }
        if (step + 1) % cfg.training.checkpoint_every == 0 || last {
            save_checkpoint(&ckpt_path, &header(step as u64 + 1), &model.net.params)?;
        }
    }
    write_log_csv(&out.join("train_log.csv"), &log)?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        log,
    })
}

/// Rebuild the teacher from its checkpoint, verifying role and schedule.
pub fn load_teacher(
    path: &Path,
    cfg: &ExperimentConfig,
) -> anyhow::Result<EdmDenoiser<f32>> {
    let (header, params) = load_checkpoint::<f32>(path)
        .with_context(|| format!("loading teacher checkpoint {}", path.display()))?;
    if header.kind != ModelKind::Teacher {
        bail!("{} is not a teacher checkpoint", path.display());
    }
    if header.schedule_hash != cfg.schedule.hash() {
        bail!(
            "checkpoint {} was trained under a different noise schedule",
            path.display()
        );
    }
    let net = TinyUNet::load(header.net, params)?;
    Ok(EdmDenoiser::new(net, cfg.schedule.sigma_data))
}

pub fn load_distilled(
    path: &Path,
    cfg: &ExperimentConfig,
) -> anyhow::Result<ConsistencyModel<f32>> {
    let (header, params) = load_checkpoint::<f32>(path)
        .with_context(|| format!("loading distilled checkpoint {}", path.display()))?;
    if header.kind != ModelKind::Distilled {
        bail!("{} is not a distilled checkpoint", path.display());
    }
    if header.schedule_hash != cfg.schedule.hash() {
        bail!(
            "checkpoint {} was distilled under a different noise schedule",
            path.display()
        );
    }
    let net = TinyUNet::load(header.net, params)?;
    Ok(ConsistencyModel::new(net, &cfg.schedule))
}

/// Distill the teacher into a one-step model; writes `distilled.ckpt`.
pub fn run_distillation(
    cfg: &ExperimentConfig,
    teacher_ckpt: &Path,
    manifest: &DatasetManifest,
    data: &LoadedDataset,
    out: &Path,
) -> anyhow::Result<TrainSummary> {
    let teacher = load_teacher(teacher_ckpt, cfg)?;
    if teacher.net.cfg.image_size != manifest.bev.height {
        bail!("teacher image size does not match the dataset");
    }
    let mut student = ConsistencyModel::from_teacher(&teacher, &cfg.schedule);
    let mut target = student.clone();
    let dcfg = cfg.distill.to_distill_config();
    let mut opt = Adam::new(&student.net.params, cfg.distill.learning_rate);
    let fp = FeatureNet::<f32>::shipped();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "distill", 0));

    let ckpt_path = out.join("distilled.ckpt");
    let unet_cfg = student.net.cfg.clone();
    let header = |step: u64| CheckpointHeader {
        kind: ModelKind::Distilled,
        seed: cfg.seed,
        step,
        schedule_hash: cfg.schedule.hash(),
        net: unet_cfg.clone(),
    };

    let mut log = Vec::new();
    let mut window_loss = 0.0f64;
    let mut window_n = 0usize;
    for step in 0..cfg.distill.steps {
        let batch = pick_batch(data, &data.train_idx, cfg.distill.batch_size, &mut rng);
        let loss = distill_step(
            &mut student,
            &mut target,
            &teacher,
            &fp,
            &batch,
            &cfg.schedule,
            &dcfg,
            &mut opt,
            &mut rng,
        )
        .with_context(|| format!("distillation step {step}"))?;
        window_loss += loss as f64;
        window_n += 1;
        let last = step + 1 == cfg.distill.steps;
        if (step + 1) % cfg.training.log_every == 0 || last {
            log.push(LogRow {
                step: step + 1,
                train_loss: window_loss / window_n as f64,
                val_loss: f64::NAN,
            });
            window_loss = 0.0;
            window_n = 0;
        }
        if (step + 1) % cfg.training.checkpoint_every == 0 || last {
            save_checkpoint(&ckpt_path, &header(step as u64 + 1), &student.net.params)?;
        }
    }
    let mut text = String::from("step,distill_loss\n");
    for row in &log {
        text.push_str(&format!("{},{}\n", row.step, row.train_loss));
    }
    std::fs::write(out.join("distill_log.csv"), text)?;
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        log,
    })
}
