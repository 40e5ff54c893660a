//! Experiment configuration file (TOML). Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use radbev::cfar::{CfarConfig, CfarVariant};
use radbev::denoiser::LossWeights;
use radbev::diffusion::NoiseSchedule;
use radbev::dsp::{DopplerIntegration, RahParams, Window};
use radbev::geometry::BevSpec;
use radbev::nn::UNetConfig;
use radbev::signal::{SceneKind, WaveformConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Output directory; `--out` overrides it.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub waveform: WaveformSection,
    #[serde(default)]
    pub rah: RahSection,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub cfar: CfarSection,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_out_dir() -> String {
    "runs/out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kinds: Vec<String>,
    pub sequences_per_kind: usize,
    pub frames_per_sequence: usize,
    /// First-k-sequences split: these go to the training set.
    pub train_sequences_per_kind: usize,
    /// Complex noise std added to the IF signal.
    pub noise_std: f64,
    /// BEV grid resolution (square).
    pub image_size: usize,
    pub range_extent_m: f64,
    pub fov_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kinds: vec!["corridor".into(), "random_boxes".into()],
            sequences_per_kind: 5,
            frames_per_sequence: 50,
            train_sequences_per_kind: 4,
            noise_std: 0.5,
            image_size: 64,
            range_extent_m: 12.8,
            fov_deg: 120.0,
        }
    }
}

impl DatasetConfig {
    pub fn scene_kinds(&self) -> anyhow::Result<Vec<SceneKind>> {
        self.kinds
            .iter()
            .map(|k| SceneKind::parse(k).map_err(anyhow::Error::from))
            .collect()
    }

    pub fn bev_spec(&self) -> BevSpec {
        BevSpec {
            height: self.image_size,
            width: self.image_size,
            range_extent_m: self.range_extent_m,
            fov_rad: self.fov_deg.to_radians(),
        }
    }
}

/// Waveform section; omitted spacing defaults to half a wavelength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformSection {
    pub carrier_hz: f64,
    pub slope_hz_per_s: f64,
    pub chirp_duration_s: f64,
    pub samples_per_chirp: usize,
    pub sample_rate_hz: f64,
    pub chirps_per_frame: usize,
    pub n_tx: usize,
    pub n_rx: usize,
    pub antenna_spacing_m: Option<f64>,
}

impl Default for WaveformSection {
    fn default() -> Self {
        let w = WaveformConfig::default();
        Self {
            carrier_hz: w.carrier_hz,
            slope_hz_per_s: w.slope_hz_per_s,
            chirp_duration_s: w.chirp_duration_s,
            samples_per_chirp: w.samples_per_chirp,
            sample_rate_hz: w.sample_rate_hz,
            chirps_per_frame: w.chirps_per_frame,
            n_tx: w.n_tx,
            n_rx: w.n_rx,
            antenna_spacing_m: None,
        }
    }
}

impl WaveformSection {
    pub fn to_waveform(&self) -> WaveformConfig {
        let lambda = radbev::signal::SPEED_OF_LIGHT / self.carrier_hz;
        WaveformConfig {
            carrier_hz: self.carrier_hz,
            slope_hz_per_s: self.slope_hz_per_s,
            chirp_duration_s: self.chirp_duration_s,
            samples_per_chirp: self.samples_per_chirp,
            sample_rate_hz: self.sample_rate_hz,
            chirps_per_frame: self.chirps_per_frame,
            n_tx: self.n_tx,
            n_rx: self.n_rx,
            antenna_spacing_m: self.antenna_spacing_m.unwrap_or(lambda / 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RahSection {
    pub n_angle_bins: usize,
    pub doppler: DopplerIntegration,
    pub window: Window,
}

impl Default for RahSection {
    fn default() -> Self {
        let p = RahParams::default();
        Self {
            n_angle_bins: p.n_angle_bins,
            doppler: p.doppler,
            window: p.window,
        }
    }
}

impl RahSection {
    pub fn to_params(&self) -> RahParams {
        RahParams {
            n_angle_bins: self.n_angle_bins,
            doppler: self.doppler,
            window: self.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels: Vec<usize>,
    pub emb_dim: usize,
    pub norm_groups: usize,
    pub attention: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: vec![4, 8, 16, 24],
            emb_dim: 16,
            norm_groups: 4,
            attention: true,
        }
    }
}

impl ModelSection {
    pub fn unet_config(&self, image_size: usize) -> UNetConfig {
        UNetConfig {
            image_size,
            data_channels: 1,
            cond_channels: 1,
            channels: self.channels.clone(),
            emb_dim: self.emb_dim,
            norm_groups: self.norm_groups,
            attention: self.attention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_mse: f64,
    pub lambda_perceptual: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            learning_rate: 1e-5,
            lambda_mse: 0.8,
            lambda_perceptual: 0.2,
            log_every: 100,
            checkpoint_every: 1000,
        }
    }
}

impl TrainingConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_mse: self.lambda_mse,
            lambda_perceptual: self.lambda_perceptual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub grid_size: usize,
    pub metric: radbev::consistency::DistillMetric,
    #[serde(default = "default_clip_denoised")]
    pub clip_denoised: bool,
}

fn default_clip_denoised() -> bool {
    true
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 4,
            learning_rate: 1e-3,
            ema_decay: 0.999,
            grid_size: 18,
            metric: radbev::consistency::DistillMetric::L2,
            clip_denoised: true,
        }
    }
}

impl DistillSection {
    pub fn to_distill_config(&self) -> radbev::consistency::DistillConfig {
        radbev::consistency::DistillConfig {
            ema_decay: self.ema_decay,
            grid_size: self.grid_size,
            metric: self.metric,
            steps: self.steps,
            clip_denoised: self.clip_denoised,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfarSection {
    pub train_cells: usize,
    pub guard_cells: usize,
    pub os_rank_fraction: f64,
    pub design_pfa: f64,
    /// Multipliers applied to the design alpha during the benchmark sweep.
    pub alpha_sweep: Vec<f64>,
}

impl Default for CfarSection {
    fn default() -> Self {
        Self {
            train_cells: 8,
            guard_cells: 2,
            os_rank_fraction: 0.75,
            design_pfa: 1e-3,
            alpha_sweep: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl CfarSection {
    /// OS-CFAR config at the design false-alarm rate.
    pub fn os_config(&self) -> CfarConfig {
        let n = 4 * self.train_cells;
        let rank = ((n as f64 * self.os_rank_fraction).round() as usize).clamp(1, n);
        let alpha = radbev::cfar::os_alpha_for_pfa(n, rank, self.design_pfa, 400_000, 0x05cfa);
        CfarConfig {
            variant: CfarVariant::Os,
            train_cells: self.train_cells,
            guard_cells: self.guard_cells,
            os_rank: rank,
            scale_factor: alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<String>,
    pub extract_threshold: f64,
    pub sample_seed: u64,
    /// How many test frames get PGM snapshots per method.
    pub n_sample_images: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                "oscfar".into(),
                "teacher_edm".into(),
                "distilled_cd".into(),
            ],
            extract_threshold: 0.5,
            sample_seed: 99,
            n_sample_images: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let ds = &self.dataset;
        if ds.kinds.is_empty() {
            bail!("dataset.kinds must not be empty");
        }
        ds.scene_kinds()?;
        if ds.train_sequences_per_kind >= ds.sequences_per_kind {
            bail!("train_sequences_per_kind must leave at least one test sequence");
        }
        if ds.frames_per_sequence == 0 || ds.sequences_per_kind == 0 {
            bail!("dataset counts must be positive");
        }
        self.waveform.to_waveform().validate()?;
        self.schedule.validate()?;
        self.model
            .unet_config(ds.image_size)
            .validate()
            .map_err(anyhow::Error::from)?;
        if self.training.batch_size == 0 || self.distill.batch_size == 0 {
            bail!("batch sizes must be positive");
        }
        if !(0.0 < self.bench.extract_threshold && self.bench.extract_threshold < 1.0) {
            bail!("bench.extract_threshold must lie in (0, 1)");
        }
        for m in &self.bench.methods {
            if !matches!(m.as_str(), "oscfar" | "teacher_edm" | "distilled_cd") {
                bail!("unknown benchmark method `{m}`");
            }
        }
        Ok(())
    }

    /// Hash of every field that influences dataset generation.
    pub fn dataset_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct GenerationRelevant<'a> {
            seed: u64,
            dataset: &'a DatasetConfig,
            waveform: &'a WaveformSection,
            rah: &'a RahSection,
        }
        let json = serde_json::to_vec(&GenerationRelevant {
            seed: self.seed,
            dataset: &self.dataset,
            waveform: &self.waveform,
            rah: &self.rah,
        })
        .expect("config serializes");
        fnv1a(&json)
    }
}

/// FNV-1a over raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(label.len() + 16);
    bytes.extend_from_slice(&parent.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = ExperimentConfig {
            seed: 1,
            out_dir: "runs/x".into(),
            dataset: DatasetConfig::default(),
            waveform: WaveformSection::default(),
            rah: RahSection::default(),
            schedule: NoiseSchedule::default(),
            model: ModelSection::default(),
            training: TrainingConfig::default(),
            distill: DistillSection::default(),
            cfar: CfarSection::default(),
            bench: BenchConfig::default(),
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seed = 3").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dataset.image_size, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("seed = 3\nbanana = 1").unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
        let err =
            toml::from_str::<ExperimentConfig>("seed = 3\n[dataset]\nnot_a_key = 2").unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn dataset_hash_tracks_generation_fields_only() {
        let base: ExperimentConfig = toml::from_str("seed = 3").unwrap();
        let mut other = base.clone();
        other.training.steps = 99;
        assert_eq!(base.dataset_hash(), other.dataset_hash());
        other.dataset.noise_std = 0.9;
        assert_ne!(base.dataset_hash(), other.dataset_hash());
        let mut reseeded = base.clone();
        reseeded.seed = 4;
        assert_ne!(base.dataset_hash(), reseeded.dataset_hash());
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, "train", 0), derive_seed(1, "noise", 0));
        assert_ne!(derive_seed(1, "train", 0), derive_seed(1, "train", 1));
        assert_eq!(derive_seed(1, "train", 0), derive_seed(1, "train", 0));
    }
}
