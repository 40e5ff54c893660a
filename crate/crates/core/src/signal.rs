//! Synthetic scene generation and FMCW intermediate-frequency simulation.
//!
//! Scenes are sets of ideal point scatterers in a 2D polar extent. A frame
//! simulation mixes every scatterer's echo down to the IF tone model: a
//! constant beat frequency `f = 2*S*r/C` along fast time, a per-chirp phase
//! step `4*pi*v*T_c/lambda` along slow time, and a per-antenna phase step
//! `2*pi*l*sin(theta)/lambda` across the azimuth virtual array, plus
//! additive complex white Gaussian noise. The same scatterers double as the
//! ground-truth point cloud for the cross-modal pipeline.

use ndarray::Array3;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, PointCloud2D};
use crate::num::{real, Float};

/// Propagation speed used by every range/frequency conversion (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// FMCW waveform and array geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformConfig {
    /// Carrier frequency (Hz).
    pub carrier_hz: f64,
    /// Chirp slope rate S (Hz/s).
    pub slope_hz_per_s: f64,
    /// Chirp duration T_c including idle time (s).
    pub chirp_duration_s: f64,
    /// Fast-time samples per chirp N_s.
    pub samples_per_chirp: usize,
    /// ADC sample rate f_s (Hz).
    pub sample_rate_hz: f64,
    /// Chirps per frame N_chirp.
    pub chirps_per_frame: usize,
    /// Transmit antennas N_TX.
    pub n_tx: usize,
    /// Receive antennas N_RX.
    pub n_rx: usize,
    /// Virtual-element spacing l (m). Defaults to lambda/2.
    pub antenna_spacing_m: f64,
}

impl Default for WaveformConfig {
    /// 77 GHz single-chip defaults: 8 azimuth virtual elements at
    /// half-wavelength spacing, 256 samples at 10 MHz, 64 chirps.
    fn default() -> Self {
        let carrier_hz = 77.0e9;
        let lambda = SPEED_OF_LIGHT / carrier_hz;
        Self {
            carrier_hz,
            slope_hz_per_s: 3.0e13,
            chirp_duration_s: 50.0e-6,
            samples_per_chirp: 256,
            sample_rate_hz: 10.0e6,
            chirps_per_frame: 64,
            n_tx: 2,
            n_rx: 4,
            antenna_spacing_m: lambda / 2.0,
        }
    }
}

impl WaveformConfig {
    /// Wavelength lambda = C / carrier (m).
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Virtual azimuth array size N_virt = N_TX * N_RX.
    pub fn n_virtual(&self) -> usize {
        self.n_tx * self.n_rx
    }

    /// Maximum unambiguous range C * f_s / (2 * S) (m).
    pub fn max_unambiguous_range(&self) -> f64 {
        SPEED_OF_LIGHT * self.sample_rate_hz / (2.0 * self.slope_hz_per_s)
    }

    /// Maximum unambiguous radial velocity lambda / (4 * T_c) (m/s).
    pub fn max_unambiguous_velocity(&self) -> f64 {
        self.wavelength() / (4.0 * self.chirp_duration_s)
    }

    /// Range covered by one FFT bin: C * f_s / (2 * S * N_s) (m).
    pub fn range_bin_size(&self) -> f64 {
        SPEED_OF_LIGHT * self.sample_rate_hz
            / (2.0 * self.slope_hz_per_s * self.samples_per_chirp as f64)
    }

    /// Velocity covered by one Doppler bin: lambda / (2 * N_chirp * T_c) (m/s).
    pub fn velocity_bin_size(&self) -> f64 {
        self.wavelength() / (2.0 * self.chirps_per_frame as f64 * self.chirp_duration_s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.carrier_hz <= 0.0 || self.slope_hz_per_s <= 0.0 || self.sample_rate_hz <= 0.0 {
            return Err(Error::Config(
                "carrier, slope and sample rate must be positive".into(),
            ));
        }
        if self.samples_per_chirp < 1
            || self.chirps_per_frame < 1
            || self.n_tx < 1
            || self.n_rx < 1
        {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if self.antenna_spacing_m <= 0.0 {
            return Err(Error::Config("antenna spacing must be positive".into()));
        }
        let sampling_window = self.samples_per_chirp as f64 / self.sample_rate_hz;
        if sampling_window > self.chirp_duration_s {
            return Err(Error::Config(format!(
                "sampling window {sampling_window:.3e}s exceeds chirp duration {:.3e}s",
                self.chirp_duration_s
            )));
        }
        // Swept bandwidth must stay inside the usable band around the
        // carrier; 5% of the carrier is a generous single-band budget.
        let swept = self.slope_hz_per_s * sampling_window;
        if swept > 0.05 * self.carrier_hz {
            return Err(Error::Config(format!(
                "swept bandwidth {swept:.3e} Hz exceeds usable band around carrier"
            )));
        }
        if self.max_unambiguous_range() <= 0.0 {
            return Err(Error::Config("non-positive unambiguous range".into()));
        }
        Ok(())
    }
}

/// One ideal point reflector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    /// Range from the sensor (m).
    pub range_m: f64,
    /// Azimuth, zero at boresight, positive to the left (rad).
    pub azimuth_rad: f64,
    /// Linear echo amplitude, >= 0.
    pub reflectivity: f64,
    /// Radial velocity, positive receding (m/s).
    pub radial_velocity_mps: f64,
}

impl Scatterer {
    pub fn validate(&self, cfg: &WaveformConfig) -> Result<()> {
        if !(self.range_m > 0.0 && self.range_m < cfg.max_unambiguous_range()) {
            return Err(Error::RangeViolation(format!(
                "range {} m outside (0, {}) m",
                self.range_m,
                cfg.max_unambiguous_range()
            )));
        }
        if self.azimuth_rad.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::RangeViolation(format!(
                "azimuth {} rad outside (-pi/2, pi/2)",
                self.azimuth_rad
            )));
        }
        if self.radial_velocity_mps.abs() >= cfg.max_unambiguous_velocity() {
            return Err(Error::RangeViolation(format!(
                "velocity {} m/s outside +-{} m/s",
                self.radial_velocity_mps,
                cfg.max_unambiguous_velocity()
            )));
        }
        if !(self.reflectivity >= 0.0) {
            return Err(Error::Config("reflectivity must be >= 0".into()));
        }
        Ok(())
    }
}

/// Polar observation window: max range and full field-of-view width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    /// Maximum range (m).
    pub r_max_m: f64,
    /// Full field of view (rad); scatterers live in [-fov/2, fov/2].
    pub fov_rad: f64,
}

impl Default for Extent {
    fn default() -> Self {
        Self {
            r_max_m: 12.8,
            fov_rad: 120f64.to_radians(),
        }
    }
}

/// Geometric primitive family a scene is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Two parallel walls seen along the corridor axis.
    Corridor,
    /// A few rectangle outlines at random poses.
    RandomBoxes,
    /// A jittered rock-face arc.
    RockWall,
}

impl SceneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "corridor" => Ok(SceneKind::Corridor),
            "random_boxes" => Ok(SceneKind::RandomBoxes),
            "rock_wall" => Ok(SceneKind::RockWall),
            other => Err(Error::Config(format!("unknown scene kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Corridor => "corridor",
            SceneKind::RandomBoxes => "random_boxes",
            SceneKind::RockWall => "rock_wall",
        }
    }
}

/// Ground-truth reflector set; the source of both the radar signal and the
/// reference point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub kind: SceneKind,
    pub seed: u64,
    pub extent: Extent,
    pub scatterers: Vec<Scatterer>,
}

impl Scene {
    /// Check that every scatterer lies inside the extent.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.scatterers.iter().enumerate() {
            if s.range_m > self.extent.r_max_m || s.azimuth_rad.abs() > self.extent.fov_rad / 2.0 {
                return Err(Error::Config(format!(
                    "scatterer {i} outside extent (r={}, az={})",
                    s.range_m, s.azimuth_rad
                )));
            }
        }
        Ok(())
    }
}

/// Complex IF samples for one frame, indexed (chirp, sample, virtual antenna).
#[derive(Debug, Clone)]
pub struct RadarCube<T: Float> {
    pub data: Array3<Complex<T>>,
    pub meta: WaveformConfig,
}

impl<T: Float> RadarCube<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

fn push_cartesian(scatterers: &mut Vec<Scatterer>, extent: &Extent, x: f64, y: f64, refl: f64) {
    let r = (x * x + y * y).sqrt();
    let az = y.atan2(x);
    if r > 0.3 && r < extent.r_max_m && az.abs() < extent.fov_rad / 2.0 {
        scatterers.push(Scatterer {
            range_m: r,
            azimuth_rad: az,
            reflectivity: refl,
            radial_velocity_mps: 0.0,
        });
    }
}

/// Sample a wall segment from (x0,y0) to (x1,y1) with roughly `spacing`
/// meters between reflectors and small positional jitter.
fn push_segment(
    scatterers: &mut Vec<Scatterer>,
    extent: &Extent,
    rng: &mut ChaCha8Rng,
    (x0, y0): (f64, f64),
    (x1, y1): (f64, f64),
    spacing: f64,
    refl: f64,
) {
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let n = (len / spacing).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let jx = (rng.random::<f64>() - 0.5) * spacing * 0.4;
        let jy = (rng.random::<f64>() - 0.5) * spacing * 0.4;
        let a = refl * (0.7 + 0.6 * rng.random::<f64>());
        push_cartesian(
            scatterers,
            extent,
            x0 + t * (x1 - x0) + jx,
            y0 + t * (y1 - y0) + jy,
            a,
        );
    }
}

fn push_clutter(
    scatterers: &mut Vec<Scatterer>,
    extent: &Extent,
    rng: &mut ChaCha8Rng,
    count: usize,
) {
    for _ in 0..count {
        let r = 0.5 + rng.random::<f64>() * (extent.r_max_m - 0.6);
        let az = (rng.random::<f64>() - 0.5) * extent.fov_rad * 0.95;
        scatterers.push(Scatterer {
            range_m: r,
            azimuth_rad: az,
            reflectivity: 0.05 + 0.1 * rng.random::<f64>(),
            radial_velocity_mps: 0.0,
        });
    }
}

/// Build a deterministic scene of the requested kind.
///
/// The same `(kind, seed, extent)` triple always yields an identical scene.
pub fn generate_scene(kind: SceneKind, seed: u64, extent: Extent) -> Result<Scene> {
    if extent.r_max_m <= 0.0 || extent.fov_rad <= 0.0 {
        return Err(Error::Config("extent must be positive".into()));
    }
    // Salt the stream with the kind so kinds draw independent layouts.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind.name().len() as u64) << 56 ^ 0x5ce2e);
    let mut scatterers = Vec::new();
    let spacing = 0.12;
    match kind {
        SceneKind::Corridor => {
            let half_width = 1.2 + rng.random::<f64>() * 2.0;
            let skew = (rng.random::<f64>() - 0.5) * 0.5;
            let far = extent.r_max_m * 1.1;
            for side in [-1.0, 1.0] {
                let y = side * half_width;
                push_segment(
                    &mut scatterers,
                    &extent,
                    &mut rng,
                    (0.4, y + 0.4 * skew),
                    (far, y + far * skew),
                    spacing,
                    1.0,
                );
            }
            // End wall, sometimes visible inside the extent.
            if rng.random::<f64>() < 0.5 {
                let xe = extent.r_max_m * (0.55 + 0.4 * rng.random::<f64>());
                push_segment(
                    &mut scatterers,
                    &extent,
                    &mut rng,
                    (xe, -half_width + xe * skew),
                    (xe, half_width + xe * skew),
                    spacing,
                    0.9,
                );
            }
            push_clutter(&mut scatterers, &extent, &mut rng, 6);
        }
        SceneKind::RandomBoxes => {
            let n_boxes = 2 + (rng.random::<f64>() * 3.0) as usize;
            for _ in 0..n_boxes {
                let cx = 0.25 * extent.r_max_m + rng.random::<f64>() * 0.6 * extent.r_max_m;
                let cy = (rng.random::<f64>() - 0.5) * 0.9 * cx;
                let w = 0.6 + rng.random::<f64>() * 2.0;
                let h = 0.6 + rng.random::<f64>() * 2.0;
                let ang = rng.random::<f64>() * std::f64::consts::PI;
                let (c, s) = (ang.cos(), ang.sin());
                let corners = [
                    (-w / 2.0, -h / 2.0),
                    (w / 2.0, -h / 2.0),
                    (w / 2.0, h / 2.0),
                    (-w / 2.0, h / 2.0),
                ];
                for i in 0..4 {
                    let (ax, ay) = corners[i];
                    let (bx, by) = corners[(i + 1) % 4];
                    push_segment(
                        &mut scatterers,
                        &extent,
                        &mut rng,
                        (cx + c * ax - s * ay, cy + s * ax + c * ay),
                        (cx + c * bx - s * by, cy + s * bx + c * by),
                        spacing,
                        1.0,
                    );
                }
            }
            push_clutter(&mut scatterers, &extent, &mut rng, 8);
        }
        SceneKind::RockWall => {
            let r0 = extent.r_max_m * (0.45 + 0.35 * rng.random::<f64>());
            let span = extent.fov_rad * (0.6 + 0.3 * rng.random::<f64>());
            let n = (r0 * span / spacing).ceil() as usize;
            let rough = 0.25 + 0.35 * rng.random::<f64>();
            let mut offset = 0.0;
            for i in 0..=n {
                let az = -span / 2.0 + span * i as f64 / n as f64;
                // Random-walk roughness gives the face a jagged profile.
                offset += (rng.random::<f64>() - 0.5) * rough;
                offset = offset.clamp(-1.2, 1.2);
                let r = (r0 + offset).clamp(0.5, extent.r_max_m * 0.99);
                let x = r * az.cos();
                let y = r * az.sin();
                push_cartesian(
                    &mut scatterers,
                    &extent,
                    x,
                    y,
                    0.8 + 0.4 * rng.random::<f64>(),
                );
            }
            push_clutter(&mut scatterers, &extent, &mut rng, 10);
        }
    }
    Ok(Scene {
        kind,
        seed,
        extent,
        scatterers,
    })
}

/// Simulate one frame of IF samples for `scene`.
///
/// `noise_std` is the standard deviation of the additive complex noise,
/// `sqrt(E|n|^2)`; the real and imaginary parts each get `noise_std/sqrt(2)`.
/// Noise is drawn from `rng` in element order after all echoes are summed,
/// so the noise stream does not depend on the scatterer count.
pub fn simulate_frame<T: Float>(
    scene: &Scene,
    cfg: &WaveformConfig,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RadarCube<T>> {
    cfg.validate()?;
    if noise_std < 0.0 {
        return Err(Error::Config("noise_std must be >= 0".into()));
    }
    for s in &scene.scatterers {
        s.validate(cfg)?;
    }

    let n_chirp = cfg.chirps_per_frame;
    let n_s = cfg.samples_per_chirp;
    let n_virt = cfg.n_virtual();
    let lambda = cfg.wavelength();

    let mut data = Array3::<Complex<f64>>::zeros((n_chirp, n_s, n_virt));
    let two_pi = 2.0 * std::f64::consts::PI;

    for sc in &scene.scatterers {
        let beat_hz = 2.0 * cfg.slope_hz_per_s * sc.range_m / SPEED_OF_LIGHT;
        let dphi_v = 4.0 * std::f64::consts::PI * sc.radial_velocity_mps * cfg.chirp_duration_s
            / lambda;
        let dphi_a =
            two_pi * cfg.antenna_spacing_m * sc.azimuth_rad.sin() / lambda;

        // The tone is separable across the three axes; build each factor
        // once and accumulate the outer product.
        let fast: Vec<Complex<f64>> = (0..n_s)
            .map(|n| {
                let phase = two_pi * beat_hz * n as f64 / cfg.sample_rate_hz;
                Complex::from_polar(sc.reflectivity, phase)
            })
            .collect();
        let slow: Vec<Complex<f64>> = (0..n_chirp)
            .map(|m| Complex::from_polar(1.0, dphi_v * m as f64))
            .collect();
        let across: Vec<Complex<f64>> = (0..n_virt)
            .map(|a| Complex::from_polar(1.0, dphi_a * a as f64))
            .collect();

        for (m, cv) in slow.iter().enumerate() {
            for (n, sv) in fast.iter().enumerate() {
                let base = cv * sv;
                let row = data
                    .slice_mut(ndarray::s![m, n, ..])
                    .into_slice_memory_order()
                    .expect("contiguous antenna axis");
                for (a, av) in across.iter().enumerate() {
                    row[a] += base * av;
                }
            }
        }
    }

    if noise_std > 0.0 {
        let comp = noise_std / std::f64::consts::SQRT_2;
        for v in data.iter_mut() {
            let re: f64 = f64::standard_normal(rng);
            let im: f64 = f64::standard_normal(rng);
            *v += Complex::new(re * comp, im * comp);
        }
    }

    let cast = data.mapv(|c| Complex::new(real::<T>(c.re), real::<T>(c.im)));
    Ok(RadarCube {
        data: cast,
        meta: cfg.clone(),
    })
}

/// Cartesian ground-truth points: every scatterer inside the radar FOV.
pub fn ground_truth_points(scene: &Scene) -> PointCloud2D<f64> {
    let half_fov = scene.extent.fov_rad / 2.0;
    let points = scene
        .scatterers
        .iter()
        .filter(|s| s.azimuth_rad.abs() <= half_fov && s.range_m <= scene.extent.r_max_m)
        .map(|s| Point2 {
            x: s.range_m * s.azimuth_rad.cos(),
            y: s.range_m * s.azimuth_rad.sin(),
        })
        .collect();
    PointCloud2D {
        points,
        frame_id: scene.seed,
    }
}
