//! Benchmark: per-method point clouds on the held-out split, scored against
//! the ground truth.
//!
//! The OS-CFAR arm runs on the stored linear-power maps (the threshold
//! design assumes exponential cells) across an alpha sweep and reports its
//! best mean-Chamfer operating point. Learned arms sample BEV images,
//! clamp to [0, 1], extract points at the configured threshold, and score.
//! Wall-clock timings go to a separate CSV so metric files stay bit-stable.

use std::path::Path;
use std::time::Instant;

use anyhow::bail;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use radbev::cfar::{cfar_2d, detections_to_points, CfarConfig};
use radbev::consistency::one_step_generate;
use radbev::diffusion::heun_sample_opts;
use radbev::dsp::angle_bin_centers;
use radbev::geometry::{extract_points, fov_filter, BevImage, PointCloud2D};
use radbev::io;
use radbev::metrics::{cdf_curve, chamfer, fscore, hausdorff, FSCORE_DEFAULT_D};

use super::dataset::{read_points_csv, DatasetManifest, Split};
use super::train::{load_distilled, load_teacher};
use crate::config::{derive_seed, ExperimentConfig};

#[derive(Debug, Clone, Serialize)]
pub struct FrameScore {
    pub frame_id: u64,
    pub kind: String,
    /// None when the predicted cloud was empty (excluded from CD/HD means).
    pub cd: Option<f64>,
    pub hd: Option<f64>,
    pub fscore: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub frames: usize,
    pub excluded: usize,
    pub mean_cd: Option<f64>,
    pub mean_hd: Option<f64>,
    pub mean_fscore: f64,
    pub steps_per_frame: usize,
    pub net_calls_per_frame: usize,
    pub mean_wall_ms: f64,
    pub scores: Vec<FrameScore>,
    /// OS-CFAR only: the sweep's winning threshold.
    pub chosen_alpha: Option<f64>,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub reports: Vec<MethodReport>,
}

fn score_cloud(
    truth: &PointCloud2D<f64>,
    predicted: &PointCloud2D<f64>,
    frame_id: u64,
    kind: &str,
    wall_ms: f64,
) -> FrameScore {
    if predicted.points.is_empty() {
        return FrameScore {
            frame_id,
            kind: kind.to_string(),
            cd: None,
            hd: None,
            fscore: 0.0,
            wall_ms,
        };
    }
    let cd = chamfer(truth, predicted).expect("nonempty sets");
    let hd = hausdorff(truth, predicted).expect("nonempty sets");
    let f = fscore(truth, predicted, FSCORE_DEFAULT_D).expect("nonempty sets");
    FrameScore {
        frame_id,
        kind: kind.to_string(),
        cd: Some(cd),
        hd: Some(hd),
        fscore: f,
        wall_ms,
    }
}

fn summarize(
    method: &str,
    scores: Vec<FrameScore>,
    steps_per_frame: usize,
    net_calls_per_frame: usize,
    chosen_alpha: Option<f64>,
) -> MethodReport {
    let frames = scores.len();
    let excluded = scores.iter().filter(|s| s.cd.is_none()).count();
    let live = (frames - excluded) as f64;
    let mean = |f: &dyn Fn(&FrameScore) -> Option<f64>| -> Option<f64> {
        if live == 0.0 {
            None
        } else {
            Some(scores.iter().filter_map(f).sum::<f64>() / live)
        }
    };
    let mean_cd = mean(&|s: &FrameScore| s.cd);
    let mean_hd = mean(&|s: &FrameScore| s.hd);
    let mean_fscore = scores.iter().map(|s| s.fscore).sum::<f64>() / frames.max(1) as f64;
    let mean_wall_ms = scores.iter().map(|s| s.wall_ms).sum::<f64>() / frames.max(1) as f64;
    MethodReport {
        method: method.to_string(),
        frames,
        excluded,
        mean_cd,
        mean_hd,
        mean_fscore,
        steps_per_frame,
        net_calls_per_frame,
        mean_wall_ms,
        scores,
        chosen_alpha,
    }
}

struct TestFrame {
    idx: usize,
    id: u64,
    kind: String,
    truth: PointCloud2D<f64>,
    cond: Array2<f32>,
}

fn load_test_frames(
    manifest: &DatasetManifest,
    root: &Path,
) -> anyhow::Result<Vec<TestFrame>> {
    manifest
        .split_ids(Split::Test)
        .into_iter()
        .map(|idx| {
            let f = &manifest.frames[idx];
            Ok(TestFrame {
                idx,
                id: f.id,
                kind: f.kind.clone(),
                truth: read_points_csv(&root.join(&f.points), f.id)?,
                cond: io::read_bev::<f32>(&root.join(&f.cond))?.values,
            })
        })
        .collect()
}

fn oscfar_method(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    root: &Path,
    run_dir: &Path,
    frames: &[TestFrame],
) -> anyhow::Result<MethodReport> {
    let base = cfg.cfar.os_config();
    let centers = angle_bin_centers(manifest.n_angle_bins);
    let fov = manifest.bev.fov_rad;
    let extent = manifest.bev.range_extent_m;

    // The threshold design assumes power-law cells; square the stored
    // magnitudes.
    let powers: Vec<Array2<f64>> = frames
        .iter()
        .map(|f| {
            let (mag, _) = io::read_map::<f64>(&root.join(&manifest.frames[f.idx].power), io::MAGIC_RAH)?;
            Ok(mag.mapv(|v| v * v))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut best: Option<(f64, MethodReport, CfarConfig)> = None;
    for &mult in &cfg.cfar.alpha_sweep {
        let det_cfg = CfarConfig {
            scale_factor: base.scale_factor * mult,
            ..base
        };
        let scores: Vec<FrameScore> = frames
            .par_iter()
            .zip(powers.par_iter())
            .map(|(f, power)| {
                let t0 = Instant::now();
                let detections = cfar_2d(power.view(), &det_cfg).expect("cfar window fits");
                let points = detections_to_points(
                    &detections,
                    manifest.waveform.range_bin_size(),
                    &centers,
                    f.id,
                );
                let points = fov_filter(&points, fov, extent);
                let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                score_cloud(&f.truth, &points, f.id, &f.kind, wall_ms)
            })
            .collect();
        let report = summarize("oscfar", scores, 0, 0, Some(det_cfg.scale_factor));
        let key = report.mean_cd.unwrap_or(f64::INFINITY);
        let better = match &best {
            Some((best_key, _, _)) => key < *best_key,
            None => true,
        };
        if better {
            best = Some((key, report, det_cfg));
        }
    }
    let (_, report, chosen_cfg) = best.expect("alpha sweep not empty");

    // Detector clouds for the snapshot frames, at the winning threshold.
    let samples_dir = run_dir.join("bench").join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    for (f, power) in frames.iter().zip(&powers).take(cfg.bench.n_sample_images) {
        let detections = cfar_2d(power.view(), &chosen_cfg).expect("cfar window fits");
        let points = detections_to_points(
            &detections,
            manifest.waveform.range_bin_size(),
            &centers,
            f.id,
        );
        let magnitudes: Vec<f64> = detections.iter().map(|d| d.magnitude).collect();
        io::write_cloud_csv(
            &samples_dir.join(format!("f{:05}.oscfar.csv", f.id)),
            &points,
            &magnitudes,
        )?;
        io::write_cloud_bin(
            &samples_dir.join(format!("f{:05}.oscfar.pcd", f.id)),
            &points,
            &magnitudes,
        )?;
    }
    Ok(report)
}

fn learned_method(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    frames: &[TestFrame],
    run_dir: &Path,
    method: &str,
) -> anyhow::Result<MethodReport> {
    let shape = (manifest.bev.height, manifest.bev.width);
    let threshold = cfg.bench.extract_threshold as f32;
    let spec = manifest.bev;

    enum Model {
        Teacher(radbev::denoiser::EdmDenoiser<f32>),
        Distilled(radbev::consistency::ConsistencyModel<f32>),
    }
    let (model, steps, calls) = match method {
        "teacher_edm" => {
            let path = run_dir.join("teacher.ckpt");
            if !path.exists() {
                bail!("method teacher_edm requires checkpoint {}", path.display());
            }
            let n = cfg.schedule.n_steps;
            (Model::Teacher(load_teacher(&path, cfg)?), n, 2 * n - 1)
        }
        "distilled_cd" => {
            let path = run_dir.join("distilled.ckpt");
            if !path.exists() {
                bail!("method distilled_cd requires checkpoint {}", path.display());
            }
            (Model::Distilled(load_distilled(&path, cfg)?), 1, 1)
        }
        other => bail!("unknown learned method `{other}`"),
    };

    let scores: Vec<(FrameScore, Array2<f32>)> = frames
        .par_iter()
        .map(|f| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.bench.sample_seed, method, f.id));
            let t0 = Instant::now();
            let mut img = match &model {
                Model::Teacher(teacher) => {
                    let mut x = heun_sample_opts(
                        teacher,
                        Some(&f.cond),
                        shape,
                        &cfg.schedule,
                        &mut rng,
                        None,
                        Some((0.0, 1.0)),
                    )
                    .expect("sampling");
                    // Occupancy semantics: clamp before extraction.
                    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
                    x
                }
                Model::Distilled(cm) => {
                    one_step_generate(cm, Some(&f.cond), shape, &cfg.schedule, &mut rng)
                        .expect("sampling")
                }
            };
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            let bev = BevImage {
                values: img.clone(),
                spec,
                frame_id: f.id,
            };
            let cloud = extract_points(&bev, threshold).cast::<f64>();
            let score = score_cloud(&f.truth, &cloud, f.id, &f.kind, wall_ms);
            img.mapv_inplace(|v| v.clamp(0.0, 1.0));
            (score, img)
        })
        .collect();

    // Snapshot a few predictions and their extracted clouds.
    let samples_dir = run_dir.join("bench").join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    for (f, (_, img)) in frames.iter().zip(&scores).take(cfg.bench.n_sample_images) {
        io::write_pgm(
            &samples_dir.join(format!("f{:05}.{method}.pgm", f.id)),
            img,
        )?;
        let mut points = Vec::new();
        let mut magnitudes = Vec::new();
        for ((row, col), &v) in img.indexed_iter() {
            if v >= threshold {
                let (r, az) = spec.cell_center(row, col);
                points.push(radbev::geometry::Point2 {
                    x: r * az.cos(),
                    y: r * az.sin(),
                });
                magnitudes.push(v as f64);
            }
        }
        let cloud = radbev::geometry::PointCloud2D {
            points,
            frame_id: f.id,
        };
        io::write_cloud_csv(
            &samples_dir.join(format!("f{:05}.{method}.csv", f.id)),
            &cloud,
            &magnitudes,
        )?;
    }

    Ok(summarize(
        method,
        scores.into_iter().map(|(s, _)| s).collect(),
        steps,
        calls,
        None,
    ))
}

fn write_per_frame_csv(path: &Path, report: &MethodReport) -> anyhow::Result<()> {
    let mut text = String::from("frame_id,kind,cd,hd,fscore,excluded\n");
    for s in &report.scores {
        let cd = s.cd.map(|v| v.to_string()).unwrap_or_default();
        let hd = s.hd.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.frame_id,
            s.kind,
            cd,
            hd,
            s.fscore,
            if s.cd.is_none() { 1 } else { 0 }
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_timing_csv(path: &Path, report: &MethodReport) -> anyhow::Result<()> {
    let mut text = String::from("frame_id,wall_ms\n");
    for s in &report.scores {
        text.push_str(&format!("{},{}\n", s.frame_id, s.wall_ms));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_cdf_csv(path: &Path, report: &MethodReport) -> anyhow::Result<()> {
    let cds: Vec<f64> = report.scores.iter().filter_map(|s| s.cd).collect();
    let mut text = String::from("cd,cumulative_fraction\n");
    if !cds.is_empty() {
        for (v, frac) in cdf_curve(&cds) {
            text.push_str(&format!("{},{}\n", v, frac));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Mean over the frames of one scene kind (CD/HD over non-excluded rows).
fn kind_row(report: &MethodReport, kind: Option<&str>) -> (String, usize, usize, String, String, String) {
    let rows: Vec<&FrameScore> = report
        .scores
        .iter()
        .filter(|s| kind.is_none_or(|k| s.kind == k))
        .collect();
    let excluded = rows.iter().filter(|s| s.cd.is_none()).count();
    let live = rows.len() - excluded;
    let mean_opt = |f: &dyn Fn(&FrameScore) -> Option<f64>| {
        if live == 0 {
            String::new()
        } else {
            (rows.iter().filter_map(|s| f(s)).sum::<f64>() / live as f64).to_string()
        }
    };
    let mean_f = if rows.is_empty() {
        String::new()
    } else {
        (rows.iter().map(|s| s.fscore).sum::<f64>() / rows.len() as f64).to_string()
    };
    (
        kind.unwrap_or("all").to_string(),
        rows.len(),
        excluded,
        mean_opt(&|s: &FrameScore| s.cd),
        mean_opt(&|s: &FrameScore| s.hd),
        mean_f,
    )
}

fn write_aggregate_csv(
    path: &Path,
    reports: &[MethodReport],
    kinds: &[String],
) -> anyhow::Result<()> {
    let mut text = String::from("method,kind,frames,excluded,cd,hd,fscore\n");
    for report in reports {
        for kind in kinds.iter().map(Some).chain([None]) {
            let (kind, frames, excluded, cd, hd, f) =
                kind_row(report, kind.map(|k| k.as_str()));
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                report.method, kind, frames, excluded, cd, hd, f
            ));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_metadata(
    path: &Path,
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    reports: &[MethodReport],
) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct MethodMeta<'a> {
        method: &'a str,
        frames: usize,
        excluded: usize,
        mean_cd: Option<f64>,
        mean_hd: Option<f64>,
        mean_fscore: f64,
        steps_per_frame: usize,
        net_calls_per_frame: usize,
        mean_wall_ms: f64,
        chosen_alpha: Option<f64>,
    }
    #[derive(Serialize)]
    struct Metadata<'a> {
        crate_version: &'a str,
        config_hash: &'a str,
        seed: u64,
        sample_seed: u64,
        schedule: &'a radbev::diffusion::NoiseSchedule,
        extract_threshold: f64,
        fscore_distance_m: f64,
        doppler_integration: &'a radbev::dsp::DopplerIntegration,
        noise_std: f64,
        distill_grid_size: usize,
        methods: Vec<MethodMeta<'a>>,
        notes: Vec<&'a str>,
    }
    let meta = Metadata {
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash: &manifest.config_hash,
        seed: cfg.seed,
        sample_seed: cfg.bench.sample_seed,
        schedule: &cfg.schedule,
        extract_threshold: cfg.bench.extract_threshold,
        fscore_distance_m: FSCORE_DEFAULT_D,
        doppler_integration: &cfg.rah.doppler,
        noise_std: cfg.dataset.noise_std,
        distill_grid_size: cfg.distill.grid_size,
        methods: reports
            .iter()
            .map(|r| MethodMeta {
                method: &r.method,
                frames: r.frames,
                excluded: r.excluded,
                mean_cd: r.mean_cd,
                mean_hd: r.mean_hd,
                mean_fscore: r.mean_fscore,
                steps_per_frame: r.steps_per_frame,
                net_calls_per_frame: r.net_calls_per_frame,
                mean_wall_ms: r.mean_wall_ms,
                chosen_alpha: r.chosen_alpha,
            })
            .collect(),
        notes: vec![
            "predicted BEV images are thresholded (not sampled) before point extraction",
            "oscfar runs on linear power maps; alpha swept, best mean-CD row reported",
            "metrics computed in meters on Cartesian points",
            "teacher sampler makes 2N-1 denoiser calls over N solver steps",
        ],
    };
    std::fs::write(path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Run the requested methods over the test split and write all report files
/// under `<run_dir>/bench/`.
pub fn run_benchmark(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    dataset_root: &Path,
    run_dir: &Path,
) -> anyhow::Result<BenchOutcome> {
    let frames = load_test_frames(manifest, dataset_root)?;
    if frames.is_empty() {
        bail!("no test frames in manifest");
    }
    let bench_dir = run_dir.join("bench");
    std::fs::create_dir_all(&bench_dir)?;

    // Truth and condition snapshots once.
    for f in frames.iter().take(cfg.bench.n_sample_images) {
        let samples_dir = bench_dir.join("samples");
        std::fs::create_dir_all(&samples_dir)?;
        let truth_bev = io::read_bev::<f32>(&dataset_root.join(&manifest.frames[f.idx].bev))?;
        io::write_pgm(
            &samples_dir.join(format!("f{:05}.truth.pgm", f.id)),
            &truth_bev.values,
        )?;
        io::write_pgm(&samples_dir.join(format!("f{:05}.cond.pgm", f.id)), &f.cond)?;
    }

    let mut reports = Vec::new();
    for method in &cfg.bench.methods {
        let report = match method.as_str() {
            "oscfar" => oscfar_method(cfg, manifest, dataset_root, run_dir, &frames)?,
            "teacher_edm" | "distilled_cd" => {
                learned_method(cfg, manifest, &frames, run_dir, method)?
            }
            other => bail!("unknown benchmark method `{other}`"),
        };
        write_per_frame_csv(
            &bench_dir.join(format!("per_frame_{method}.csv")),
            &report,
        )?;
        write_timing_csv(&bench_dir.join(format!("timing_{method}.csv")), &report)?;
        write_cdf_csv(&bench_dir.join(format!("cdf_{method}.csv")), &report)?;
        reports.push(report);
    }
    let kinds: Vec<String> = {
        let mut ks: Vec<String> = Vec::new();
        for f in &manifest.frames {
            if !ks.contains(&f.kind) {
                ks.push(f.kind.clone());
            }
        }
        ks
    };
    write_aggregate_csv(&bench_dir.join("aggregate.csv"), &reports, &kinds)?;
    write_metadata(&bench_dir.join("run_metadata.json"), cfg, manifest, &reports)?;
    Ok(BenchOutcome { reports })
}
