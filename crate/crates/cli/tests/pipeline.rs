//! Pipeline integration at micro scale: manifest hygiene, checkpoint
//! round trips, error reporting, and the infer path.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use radbev::diffusion::Denoiser;
use radbev::num::Float;
use radbev_cli::config::ExperimentConfig;
use radbev_cli::pipeline::{
    build_dataset, load_dataset, run_benchmark, run_distillation, run_infer, run_training,
    DatasetManifest, InferArgs, Split,
};

fn micro_config(out: &Path) -> ExperimentConfig {
    let text = r#"
seed = 5
out_dir = "replaced"

[dataset]
kinds = ["corridor", "rock_wall"]
sequences_per_kind = 2
frames_per_sequence = 4
train_sequences_per_kind = 1
noise_std = 0.4
image_size = 16
range_extent_m = 12.8
fov_deg = 120.0

[waveform]
carrier_hz = 77e9
slope_hz_per_s = 3e13
chirp_duration_s = 50e-6
samples_per_chirp = 32
sample_rate_hz = 10e6
chirps_per_frame = 8
n_tx = 2
n_rx = 4

[rah]
n_angle_bins = 16
doppler = "sum_power"
window = "hann"

[schedule]
n_steps = 6
sigma_min = 0.002
sigma_max = 80.0
rho = 7.0
sigma_data = 0.5
p_mean = -1.2
p_std = 1.2

[model]
channels = [4, 8]
emb_dim = 8
norm_groups = 2
attention = false

[training]
steps = 12
batch_size = 2
learning_rate = 1e-3
lambda_mse = 0.8
lambda_perceptual = 0.2
log_every = 6
checkpoint_every = 12

[distill]
steps = 8
batch_size = 2
learning_rate = 1e-3
ema_decay = 0.99
grid_size = 5
metric = "l2"

[cfar]
train_cells = 2
guard_cells = 1
os_rank_fraction = 0.75
design_pfa = 1e-3
alpha_sweep = [1.0]
"#;
    let mut cfg: ExperimentConfig = toml::from_str(text).unwrap();
    cfg.out_dir = out.display().to_string();
    cfg
}

#[test]
fn dataset_split_is_disjoint_and_manifest_checks_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let manifest = build_dataset(&cfg, tmp.path()).unwrap();
    assert_eq!(manifest.frames.len(), 16);

    let train: std::collections::HashSet<u64> = manifest
        .frames
        .iter()
        .filter(|f| f.split == Split::Train)
        .map(|f| f.id)
        .collect();
    let test: std::collections::HashSet<u64> = manifest
        .frames
        .iter()
        .filter(|f| f.split == Split::Test)
        .map(|f| f.id)
        .collect();
    assert_eq!(train.len() + test.len(), 16);
    assert!(train.is_disjoint(&test));

    // Reload checks referenced files.
    let loaded = DatasetManifest::load(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, manifest);
    std::fs::remove_file(tmp.path().join(&manifest.frames[0].cond)).unwrap();
    let err = DatasetManifest::load(&tmp.path().join("manifest.json")).unwrap_err();
    assert!(err.to_string().contains("missing file"), "{err}");
}

#[test]
fn checkpoint_reload_reproduces_forward_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let manifest = build_dataset(&cfg, tmp.path()).unwrap();
    let data = load_dataset(&manifest, tmp.path()).unwrap();
    run_training(&cfg, &manifest, &data, tmp.path()).unwrap();

    let a = radbev_cli::pipeline::train::load_teacher(&tmp.path().join("teacher.ckpt"), &cfg)
        .unwrap();
    let b = radbev_cli::pipeline::train::load_teacher(&tmp.path().join("teacher.ckpt"), &cfg)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_fn((16, 16), |_| f32::standard_normal(&mut rng));
    let c = Array2::from_shape_fn((16, 16), |_| f32::standard_normal(&mut rng));
    let ya = a.predict(&x, 0.7, Some(&c)).unwrap();
    let yb = b.predict(&x, 0.7, Some(&c)).unwrap();
    for (p, q) in ya.iter().zip(yb.iter()) {
        assert_eq!(p.to_bits(), q.to_bits());
    }

    // Training again into a second directory gives the identical model.
    let tmp2 = tempfile::tempdir().unwrap();
    let mut cfg2 = micro_config(tmp2.path());
    cfg2.out_dir = tmp2.path().display().to_string();
    let manifest2 = build_dataset(&cfg2, tmp2.path()).unwrap();
    let data2 = load_dataset(&manifest2, tmp2.path()).unwrap();
    run_training(&cfg2, &manifest2, &data2, tmp2.path()).unwrap();
    let ckpt1 = std::fs::read(tmp.path().join("teacher.ckpt")).unwrap();
    let ckpt2 = std::fs::read(tmp2.path().join("teacher.ckpt")).unwrap();
    assert_eq!(ckpt1, ckpt2, "same config must give bit-identical weights");
}

#[test]
fn bench_without_checkpoints_names_the_missing_method() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let manifest = build_dataset(&cfg, tmp.path()).unwrap();
    let err = run_benchmark(&cfg, &manifest, tmp.path(), tmp.path()).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("teacher_edm"), "error must name the method: {msg}");

    // The CFAR baseline alone runs with no model files present.
    let mut only_cfar = cfg.clone();
    only_cfar.bench.methods = vec!["oscfar".into()];
    let outcome = run_benchmark(&only_cfar, &manifest, tmp.path(), tmp.path()).unwrap();
    assert_eq!(outcome.reports.len(), 1);
    assert_eq!(outcome.reports[0].method, "oscfar");
    assert!(tmp.path().join("bench/aggregate.csv").exists());
}

#[test]
fn aggregate_means_match_per_frame_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let manifest = build_dataset(&cfg, tmp.path()).unwrap();
    let mut only_cfar = cfg.clone();
    only_cfar.bench.methods = vec!["oscfar".into()];
    let outcome = run_benchmark(&only_cfar, &manifest, tmp.path(), tmp.path()).unwrap();
    let report = &outcome.reports[0];

    // Recompute the aggregate from the per-frame CSV.
    let text = std::fs::read_to_string(tmp.path().join("bench/per_frame_oscfar.csv")).unwrap();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if !cols[2].is_empty() {
            sum += cols[2].parse::<f64>().unwrap();
            n += 1;
        }
    }
    if n > 0 {
        let mean = sum / n as f64;
        let diff = (mean - report.mean_cd.unwrap()).abs();
        assert!(diff < 1e-12, "aggregate {} vs recomputed {}", report.mean_cd.unwrap(), mean);
    }
}

#[test]
fn infer_runs_both_checkpoint_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro_config(tmp.path());
    let manifest = build_dataset(&cfg, tmp.path()).unwrap();
    let data = load_dataset(&manifest, tmp.path()).unwrap();
    run_training(&cfg, &manifest, &data, tmp.path()).unwrap();
    run_distillation(
        &cfg,
        &tmp.path().join("teacher.ckpt"),
        &manifest,
        &data,
        tmp.path(),
    )
    .unwrap();

    let cond = tmp.path().join(&manifest.frames[0].cond);
    for (ckpt, trace) in [("teacher.ckpt", true), ("distilled.ckpt", false)] {
        let out = tmp.path().join(format!("infer_{ckpt}"));
        run_infer(
            &cfg,
            &InferArgs {
                checkpoint: &tmp.path().join(ckpt),
                condition: &cond,
                out: &out,
                seed: 3,
                averages: 3,
                threshold: 0.5,
                trace,
            },
        )
        .unwrap();
        assert!(out.join("prediction.bev").exists());
        assert!(out.join("prediction.pgm").exists());
        assert!(out.join("prediction_points.csv").exists());
        if trace {
            let trace_text = std::fs::read_to_string(out.join("sampler_trace.csv")).unwrap();
            // One row per solver step plus the header.
            assert_eq!(trace_text.lines().count(), 1 + cfg.schedule.n_steps);
        }
    }

    // Averaging across seeds is an elementwise mean: values stay in [0,1].
    let pred = radbev::io::read_bev::<f32>(
        &tmp.path().join("infer_distilled.ckpt/prediction.bev"),
    )
    .unwrap();
    assert!(pred.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
}
