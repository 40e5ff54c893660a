//! Dataset generation: scenes -> IF frames -> heatmaps -> aligned pairs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use radbev::dsp::{make_rah, power_rah};
use radbev::geometry::{rah_to_bev_grid, rasterize, BevSpec, PointCloud2D};
use radbev::io;
use radbev::signal::{generate_scene, ground_truth_points, simulate_frame, Extent, WaveformConfig};

use crate::config::{derive_seed, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: u64,
    pub kind: String,
    pub sequence: usize,
    pub split: Split,
    pub scene: String,
    pub rah: String,
    pub cond: String,
    pub power: String,
    pub bev: String,
    pub points: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub bev: BevSpec,
    pub waveform: WaveformConfig,
    pub n_angle_bins: usize,
    pub noise_std: f64,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut seen = std::collections::HashSet::new();
        for f in &manifest.frames {
            if !seen.insert(f.id) {
                bail!("duplicate frame id {} in manifest", f.id);
            }
            for rel in [&f.scene, &f.rah, &f.cond, &f.power, &f.bev, &f.points] {
                let p = root.join(rel);
                if !p.exists() {
                    bail!("manifest references missing file {}", p.display());
                }
            }
        }
        Ok(manifest)
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Ground-truth points as CSV (`x_m,y_m`).
pub fn write_points_csv(path: &Path, cloud: &PointCloud2D<f64>) -> anyhow::Result<()> {
    let mut text = String::from("x_m,y_m\n");
    for p in &cloud.points {
        text.push_str(&format!("{},{}\n", p.x, p.y));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_points_csv(path: &Path, frame_id: u64) -> anyhow::Result<PointCloud2D<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let mut cols = line.split(',');
        let x: f64 = cols
            .next()
            .with_context(|| format!("{}:{}: missing x", path.display(), i + 1))?
            .parse()?;
        let y: f64 = cols
            .next()
            .with_context(|| format!("{}:{}: missing y", path.display(), i + 1))?
            .parse()?;
        points.push(radbev::geometry::Point2 { x, y });
    }
    Ok(PointCloud2D { points, frame_id })
}

/// Generate every frame, write the per-frame artifacts, and return the
/// manifest (also written to `<out>/manifest.json`).
pub fn build_dataset(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<DatasetManifest> {
    cfg.validate()?;
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir)?;

    let kinds = cfg.dataset.scene_kinds()?;
    let waveform = cfg.waveform.to_waveform();
    let rah_params = cfg.rah.to_params();
    let spec = cfg.dataset.bev_spec();
    let extent = Extent {
        r_max_m: cfg.dataset.range_extent_m,
        fov_rad: cfg.dataset.fov_deg.to_radians(),
    };

    struct Job {
        id: u64,
        kind_idx: usize,
        sequence: usize,
        split: Split,
        scene_seed: u64,
        noise_seed: u64,
    }
    let mut jobs = Vec::new();
    let mut id = 0u64;
    for (kind_idx, _) in kinds.iter().enumerate() {
        for sequence in 0..cfg.dataset.sequences_per_kind {
            for _ in 0..cfg.dataset.frames_per_sequence {
                let split = if sequence < cfg.dataset.train_sequences_per_kind {
                    Split::Train
                } else {
                    Split::Test
                };
                jobs.push(Job {
                    id,
                    kind_idx,
                    sequence,
                    split,
                    scene_seed: derive_seed(cfg.seed, "scene", id),
                    noise_seed: derive_seed(cfg.seed, "noise", id),
                });
                id += 1;
            }
        }
    }

    let entries: Vec<anyhow::Result<FrameEntry>> = jobs
        .par_iter()
        .map(|job| {
            let kind = kinds[job.kind_idx];
            let scene = generate_scene(kind, job.scene_seed, extent)?;
            let mut noise_rng = ChaCha8Rng::seed_from_u64(job.noise_seed);
            let cube =
                simulate_frame::<f64>(&scene, &waveform, cfg.dataset.noise_std, &mut noise_rng)?;
            let mut rah = make_rah(&cube, &rah_params)?;
            rah.frame_id = job.id;
            let power = power_rah(&cube, &rah_params)?;
            let mut cond = rah_to_bev_grid(&rah, spec);
            cond.frame_id = job.id;
            let mut truth_points = ground_truth_points(&scene);
            truth_points.frame_id = job.id;
            let (mut bev, _) = rasterize(&truth_points, spec);
            bev.frame_id = job.id;

            let stem = format!("f{:05}", job.id);
            let scene_rel = format!("frames/{stem}.scene.toml");
            let rah_rel = format!("frames/{stem}.rah");
            let cond_rel = format!("frames/{stem}.cond.bev");
            let power_rel = format!("frames/{stem}.pow");
            let bev_rel = format!("frames/{stem}.bev");
            let points_rel = format!("frames/{stem}.pts.csv");

            io::write_scene(&out.join(&scene_rel), &scene)?;
            io::write_map(
                &out.join(&rah_rel),
                io::MAGIC_RAH,
                &rah.values,
                &io::MapMeta {
                    range_bin_size_m: Some(rah.range_bin_size_m),
                    velocity_bin_size_mps: None,
                    azimuth_centers_rad: Some(rah.azimuth_centers_rad.clone()),
                    scale: "db_normalized".into(),
                    frame_id: job.id,
                },
            )?;
            io::write_map(
                &out.join(&power_rel),
                io::MAGIC_RAH,
                &power,
                &io::MapMeta {
                    range_bin_size_m: Some(rah.range_bin_size_m),
                    velocity_bin_size_mps: None,
                    azimuth_centers_rad: Some(rah.azimuth_centers_rad.clone()),
                    scale: "linear_power".into(),
                    frame_id: job.id,
                },
            )?;
            io::write_bev(&out.join(&cond_rel), &cond)?;
            io::write_bev(&out.join(&bev_rel), &bev)?;
            write_points_csv(&out.join(&points_rel), &truth_points)?;

            Ok(FrameEntry {
                id: job.id,
                kind: kind.name().to_string(),
                sequence: job.sequence,
                split: job.split,
                scene: scene_rel,
                rah: rah_rel,
                cond: cond_rel,
                power: power_rel,
                bev: bev_rel,
                points: points_rel,
            })
        })
        .collect();

    let mut frames = Vec::with_capacity(entries.len());
    for e in entries {
        frames.push(e?);
    }
    let manifest = DatasetManifest {
        config_hash: format!("{:016x}", cfg.dataset_hash()),
        bev: spec,
        waveform,
        n_angle_bins: rah_params.n_angle_bins,
        noise_std: cfg.dataset.noise_std,
        frames,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// In-memory training views of the dataset.
pub struct LoadedDataset {
    pub cond: Vec<ndarray::Array2<f32>>,
    pub bev: Vec<ndarray::Array2<f32>>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

pub fn load_dataset(manifest: &DatasetManifest, root: &Path) -> anyhow::Result<LoadedDataset> {
    let mut cond = Vec::with_capacity(manifest.frames.len());
    let mut bev = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        cond.push(io::read_bev::<f32>(&root.join(&f.cond))?.values);
        bev.push(io::read_bev::<f32>(&root.join(&f.bev))?.values);
    }
    Ok(LoadedDataset {
        cond,
        bev,
        train_idx: manifest.split_ids(Split::Train),
        test_idx: manifest.split_ids(Split::Test),
    })
}

/// Reduced path buf helper for run directories.
pub fn ensure_dir(path: &Path) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(path)?;
    Ok(path.to_path_buf())
}
