//! Range / Doppler / angle spectra and the heatmaps built from them.
//!
//! The processing chain is three FFTs over the radar cube: fast time gives
//! range, slow time gives Doppler, and the virtual-antenna axis gives
//! azimuth. Heatmaps collapse the remaining axis and are the detector and
//! conditioning inputs downstream.

use ndarray::{Array2, Array3};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{real, Float};
use crate::signal::RadarCube;

/// Magnitude floor inside the dB conversion, `20*log10(|x| + EPS_MAG)`.
pub const EPS_MAG: f64 = 1e-12;

/// Fast-time window applied before the range FFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rect,
    Hann,
}

/// How the Doppler axis is collapsed into a range-azimuth map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DopplerIntegration {
    /// Coherent sum over chirps (the zero-Doppler bin).
    ZeroDoppler,
    /// Noncoherent power sum over chirps.
    SumPower,
}

/// Parameters of the range-azimuth heatmap computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RahParams {
    pub n_angle_bins: usize,
    pub doppler: DopplerIntegration,
    pub window: Window,
}

impl Default for RahParams {
    fn default() -> Self {
        Self {
            n_angle_bins: 64,
            doppler: DopplerIntegration::SumPower,
            window: Window::Hann,
        }
    }
}

/// Range-azimuth magnitude image, dB-scaled and min-max normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeAzimuthHeatmap<T: Float> {
    /// [range bin, azimuth bin].
    pub values: Array2<T>,
    /// Meters per range bin; row `b` sits at range `b * range_bin_size_m`.
    pub range_bin_size_m: f64,
    /// Azimuth bin centers (rad), uniform in sin(theta).
    pub azimuth_centers_rad: Vec<f64>,
    pub frame_id: u64,
}

/// Range-Doppler magnitude image, dB-scaled and min-max normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeDopplerHeatmap<T: Float> {
    /// [range bin, doppler bin]; zero velocity is the center column.
    pub values: Array2<T>,
    pub range_bin_size_m: f64,
    /// Meters/second per Doppler bin.
    pub velocity_bin_size_mps: f64,
    pub frame_id: u64,
}

// ---------------------------------------------------------------------
// FFT kernel
// ---------------------------------------------------------------------

/// Forward DFT of `data`, radix-2 in place for power-of-two lengths and a
/// direct O(n^2) evaluation otherwise.
pub fn fft<T: Float>(data: &[Complex<T>]) -> Vec<Complex<T>> {
    let n = data.len();
    if n <= 1 {
        return data.to_vec();
    }
    if n.is_power_of_two() {
        let mut buf = data.to_vec();
        fft_pow2_in_place(&mut buf);
        buf
    } else {
        dft(data)
    }
}

fn fft_pow2_in_place<T: Float>(data: &mut [Complex<T>]) {
    let n = data.len();
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            data.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j >= m {
            j -= m;
            m >>= 1;
        }
        j += m;
    }
    // Butterflies with twiddles computed in f64 and cast once per stage.
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * std::f64::consts::PI / len as f64;
        let twiddles: Vec<Complex<T>> = (0..half)
            .map(|k| {
                let ang = step * k as f64;
                Complex::new(real::<T>(ang.cos()), real::<T>(ang.sin()))
            })
            .collect();
        let mut start = 0;
        while start < n {
            for k in 0..half {
                let even = data[start + k];
                let odd = data[start + k + half] * twiddles[k];
                data[start + k] = even + odd;
                data[start + k + half] = even - odd;
            }
            start += len;
        }
        len <<= 1;
    }
}

fn dft<T: Float>(data: &[Complex<T>]) -> Vec<Complex<T>> {
    let n = data.len();
    (0..n)
        .map(|k| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (j, &x) in data.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * j % n) as f64 / n as f64;
                acc += x * Complex::new(real::<T>(ang.cos()), real::<T>(ang.sin()));
            }
            acc
        })
        .collect()
}

/// Swap halves so the zero-frequency bin lands at index n/2.
pub fn fftshift<T: Clone>(data: &[T]) -> Vec<T> {
    let n = data.len();
    let half = n.div_ceil(2);
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&data[half..]);
    out.extend_from_slice(&data[..half]);
    out
}

fn window_coefficients(window: Window, n: usize) -> Vec<f64> {
    match window {
        Window::Rect => vec![1.0; n],
        Window::Hann => (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
            .collect(),
    }
}

// ---------------------------------------------------------------------
// FFT chain over the cube
// ---------------------------------------------------------------------

fn ensure_finite<T: Float>(data: &Array3<Complex<T>>, stage: &str) -> Result<()> {
    if data.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(Error::Numeric(format!("non-finite input to {stage}")));
    }
    Ok(())
}

/// FFT along fast time per (chirp, antenna); keeps the lower `N_s/2` bins
/// (real-beat-tone convention). Bin `b` maps to range
/// `b * C * f_s / (2 * S * N_s)`.
pub fn range_fft<T: Float>(
    cube: &RadarCube<T>,
    window: Window,
) -> Result<Array3<Complex<T>>> {
    let (n_chirp, n_s, n_virt) = cube.dims();
    if n_s < 2 {
        return Err(Error::Config("range FFT needs at least 2 samples".into()));
    }
    ensure_finite(&cube.data, "range_fft")?;
    let n_keep = n_s / 2;
    let coeffs: Vec<T> = window_coefficients(window, n_s)
        .into_iter()
        .map(real::<T>)
        .collect();
    let mut out = Array3::zeros((n_chirp, n_keep, n_virt));
    let mut line = vec![Complex::new(T::zero(), T::zero()); n_s];
    for m in 0..n_chirp {
        for a in 0..n_virt {
            for n in 0..n_s {
                line[n] = cube.data[[m, n, a]] * coeffs[n];
            }
            let spec = fft(&line);
            for b in 0..n_keep {
                out[[m, b, a]] = spec[b];
            }
        }
    }
    Ok(out)
}

/// FFT along the chirp axis, shifted so zero velocity is the center bin.
///
/// Input and output are indexed [chirp/doppler, range bin, antenna].
pub fn doppler_fft<T: Float>(range_spectrum: &Array3<Complex<T>>) -> Result<Array3<Complex<T>>> {
    let (n_chirp, n_range, n_virt) = range_spectrum.dim();
    if n_chirp < 2 {
        return Err(Error::Config("Doppler FFT needs at least 2 chirps".into()));
    }
    ensure_finite(range_spectrum, "doppler_fft")?;
    let mut out = Array3::zeros((n_chirp, n_range, n_virt));
    let mut line = vec![Complex::new(T::zero(), T::zero()); n_chirp];
    for b in 0..n_range {
        for a in 0..n_virt {
            for m in 0..n_chirp {
                line[m] = range_spectrum[[m, b, a]];
            }
            let shifted = fftshift(&fft(&line));
            for d in 0..n_chirp {
                out[[d, b, a]] = shifted[d];
            }
        }
    }
    Ok(out)
}

/// Zero-padded FFT along the antenna axis, shifted; bin `k` maps to
/// `theta = asin(2*(k - n/2)/n)` for half-wavelength spacing.
pub fn angle_fft<T: Float>(
    range_spectrum: &Array3<Complex<T>>,
    n_angle_bins: usize,
) -> Result<Array3<Complex<T>>> {
    let (n_chirp, n_range, n_virt) = range_spectrum.dim();
    if n_angle_bins < n_virt || !n_angle_bins.is_power_of_two() {
        return Err(Error::Config(format!(
            "n_angle_bins {n_angle_bins} must be a power of two >= {n_virt}"
        )));
    }
    ensure_finite(range_spectrum, "angle_fft")?;
    let mut out = Array3::zeros((n_chirp, n_range, n_angle_bins));
    let mut line = vec![Complex::new(T::zero(), T::zero()); n_angle_bins];
    for m in 0..n_chirp {
        for b in 0..n_range {
            line.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
            for a in 0..n_virt {
                line[a] = range_spectrum[[m, b, a]];
            }
            let shifted = fftshift(&fft(&line));
            for k in 0..n_angle_bins {
                out[[m, b, k]] = shifted[k];
            }
        }
    }
    Ok(out)
}

/// Azimuth bin centers for an `n`-bin angle FFT at half-wavelength spacing.
pub fn angle_bin_centers(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| (2.0 * (k as f64 - n as f64 / 2.0) / n as f64).clamp(-1.0, 1.0).asin())
        .collect()
}

/// Broadside angular resolution `lambda / (N * l * cos(theta))` in radians,
/// with `l` expressed in wavelengths.
pub fn angular_resolution(n_virtual: usize, spacing_wavelengths: f64, theta_rad: f64) -> f64 {
    1.0 / (n_virtual as f64 * spacing_wavelengths * theta_rad.cos())
}

fn db_normalize<T: Float>(mut magnitudes: Array2<T>) -> Array2<T> {
    magnitudes.mapv_inplace(|v| {
        real::<T>(20.0 * (v.to_f64().unwrap() + EPS_MAG).log10())
    });
    let mut min = T::infinity();
    let mut max = T::neg_infinity();
    for &v in magnitudes.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        // Degenerate all-equal map, defined as all-zero.
        magnitudes.fill(T::zero());
        return magnitudes;
    }
    let span = max - min;
    magnitudes.mapv_inplace(|v| (v - min) / span);
    magnitudes
}

/// Linear range-azimuth magnitude map before dB scaling and normalization.
///
/// This is what ratio-test detectors should consume: on pure complex
/// Gaussian noise with `SumPower` integration the squared values are
/// exponential-family, which the CFAR threshold design assumes.
pub fn power_rah<T: Float>(cube: &RadarCube<T>, params: &RahParams) -> Result<Array2<T>> {
    let ranged = range_fft(cube, params.window)?;
    let angled = angle_fft(&ranged, params.n_angle_bins)?;
    let (n_chirp, n_range, n_angle) = angled.dim();
    let mut out = Array2::<T>::zeros((n_range, n_angle));
    match params.doppler {
        DopplerIntegration::ZeroDoppler => {
            for b in 0..n_range {
                for k in 0..n_angle {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for m in 0..n_chirp {
                        acc += angled[[m, b, k]];
                    }
                    out[[b, k]] = acc.norm();
                }
            }
        }
        DopplerIntegration::SumPower => {
            for b in 0..n_range {
                for k in 0..n_angle {
                    let mut acc = T::zero();
                    for m in 0..n_chirp {
                        acc += angled[[m, b, k]].norm_sqr();
                    }
                    out[[b, k]] = acc.sqrt();
                }
            }
        }
    }
    Ok(out)
}

/// Range FFT -> angle FFT -> magnitude in dB -> Doppler collapse -> per-frame
/// min-max normalization to [0, 1].
pub fn make_rah<T: Float>(
    cube: &RadarCube<T>,
    params: &RahParams,
) -> Result<RangeAzimuthHeatmap<T>> {
    let magnitudes = power_rah(cube, params)?;
    Ok(RangeAzimuthHeatmap {
        values: db_normalize(magnitudes),
        range_bin_size_m: cube.meta.range_bin_size(),
        azimuth_centers_rad: angle_bin_centers(params.n_angle_bins),
        frame_id: 0,
    })
}

/// Range FFT -> Doppler FFT -> magnitude in dB (antennas power-summed) ->
/// per-frame min-max normalization to [0, 1].
pub fn make_rdh<T: Float>(cube: &RadarCube<T>, window: Window) -> Result<RangeDopplerHeatmap<T>> {
    let ranged = range_fft(cube, window)?;
    let dopplered = doppler_fft(&ranged)?;
    let (n_doppler, n_range, n_virt) = dopplered.dim();
    let mut mag = Array2::<T>::zeros((n_range, n_doppler));
    for b in 0..n_range {
        for d in 0..n_doppler {
            let mut acc = T::zero();
            for a in 0..n_virt {
                acc += dopplered[[d, b, a]].norm_sqr();
            }
            mag[[b, d]] = acc.sqrt();
        }
    }
    Ok(RangeDopplerHeatmap {
        values: db_normalize(mag),
        range_bin_size_m: cube.meta.range_bin_size(),
        velocity_bin_size_mps: cube.meta.velocity_bin_size(),
        frame_id: 0,
    })
}

/// Linear range-Doppler magnitude map (antennas power-summed), kept for
/// noise-statistics checks.
pub fn magnitude_rdh<T: Float>(cube: &RadarCube<T>, window: Window) -> Result<Array2<T>> {
    let ranged = range_fft(cube, window)?;
    let dopplered = doppler_fft(&ranged)?;
    let (n_doppler, n_range, n_virt) = dopplered.dim();
    let mut mag = Array2::<T>::zeros((n_range, n_doppler));
    for b in 0..n_range {
        for d in 0..n_doppler {
            let mut acc = T::zero();
            for a in 0..n_virt {
                acc += dopplered[[d, b, a]].norm_sqr();
            }
            mag[[b, d]] = acc.sqrt();
        }
    }
    Ok(mag)
}

/// Location of the strongest cell of the full range/Doppler/angle volume.
#[derive(Debug, Clone, Copy)]
pub struct PeakLocation {
    pub range_bin: usize,
    pub doppler_bin: usize,
    pub angle_bin: usize,
}

/// Process the cube through all three FFTs (rect window) and return the
/// argmax cell of the magnitude volume.
pub fn locate_peak<T: Float>(cube: &RadarCube<T>, n_angle_bins: usize) -> Result<PeakLocation> {
    let ranged = range_fft(cube, Window::Rect)?;
    let dopplered = doppler_fft(&ranged)?;
    let angled = angle_fft(&dopplered, n_angle_bins)?;
    let (n_doppler, n_range, n_angle) = angled.dim();
    let mut best = (T::neg_infinity(), PeakLocation {
        range_bin: 0,
        doppler_bin: 0,
        angle_bin: 0,
    });
    for d in 0..n_doppler {
        for b in 0..n_range {
            for k in 0..n_angle {
                let v = angled[[d, b, k]].norm_sqr();
                if v > best.0 {
                    best = (
                        v,
                        PeakLocation {
                            range_bin: b,
                            doppler_bin: d,
                            angle_bin: k,
                        },
                    );
                }
            }
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{
        simulate_frame, Extent, Scatterer, Scene, SceneKind, WaveformConfig,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Naive DFT evaluated straight from the definition; the oracle the
    /// radix-2 path is checked against.
    fn dft_oracle(data: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = data.len();
        (0..n)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for (j, &x) in data.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k as f64) * (j as f64) / n as f64;
                    acc += x * Complex::new(ang.cos(), ang.sin());
                }
                acc
            })
            .collect()
    }

    fn max_rel_err(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        let scale = b.iter().map(|c| c.norm()).fold(0.0f64, f64::max).max(1e-300);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn fft_matches_dft_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &n in &[2usize, 4, 8, 13, 64, 100, 256] {
            for _ in 0..5 {
                let data: Vec<Complex<f64>> = (0..n)
                    .map(|_| Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                    .collect();
                let ours = fft(&data);
                let oracle = dft_oracle(&data);
                assert!(max_rel_err(&ours, &oracle) < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn fft_preserves_power_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &n in &[8usize, 64, 256] {
            let data: Vec<Complex<f64>> = (0..n)
                .map(|_| Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let spec = fft(&data);
            let time_power: f64 = data.iter().map(|c| c.norm_sqr()).sum();
            let freq_power: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
            let rel = (freq_power - n as f64 * time_power).abs() / (n as f64 * time_power);
            assert!(rel < 1e-9, "n={n} rel={rel}");
        }
    }

    fn scene_with(scatterers: Vec<Scatterer>) -> Scene {
        Scene {
            kind: SceneKind::Corridor,
            seed: 0,
            extent: Extent {
                r_max_m: 40.0,
                fov_rad: 3.0,
            },
            scatterers,
        }
    }

    fn tone_cube(r: f64, az: f64, v: f64) -> RadarCube<f64> {
        let cfg = WaveformConfig::default();
        let scene = scene_with(vec![Scatterer {
            range_m: r,
            azimuth_rad: az,
            reflectivity: 1.0,
            radial_velocity_mps: v,
        }]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        simulate_frame(&scene, &cfg, 0.0, &mut rng).unwrap()
    }

    #[test]
    fn range_fft_peaks_at_expected_bin() {
        // 3 MHz tone at f_s = 10 MHz over 256 samples -> bin 76.8 -> 77.
        let cube = tone_cube(15.0, 0.0, 0.0);
        let spec = range_fft(&cube, Window::Rect).unwrap();
        let (peak, _) = (0..128)
            .map(|b| (b, spec[[0, b, 0]].norm()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(peak, 77);
    }

    #[test]
    fn range_fft_zero_cube_is_zero_and_two_tones_resolve() {
        let cfg = WaveformConfig::default();
        let zero = RadarCube::<f64> {
            data: Array3::zeros((4, 16, 2)),
            meta: cfg.clone(),
        };
        let spec = range_fft(&zero, Window::Rect).unwrap();
        assert!(spec.iter().all(|c| c.norm() == 0.0));

        // Two tones separated by far more than one bin.
        let cube = {
            let scene = scene_with(vec![
                Scatterer {
                    range_m: 5.0,
                    azimuth_rad: 0.0,
                    reflectivity: 1.0,
                    radial_velocity_mps: 0.0,
                },
                Scatterer {
                    range_m: 15.0,
                    azimuth_rad: 0.0,
                    reflectivity: 1.0,
                    radial_velocity_mps: 0.0,
                },
            ]);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            simulate_frame::<f64>(&scene, &cfg, 0.0, &mut rng).unwrap()
        };
        let spec = range_fft(&cube, Window::Rect).unwrap();
        let mags: Vec<f64> = (0..128).map(|b| spec[[0, b, 0]].norm()).collect();
        let b1 = (5.0 / cfg.range_bin_size()).round() as usize;
        let b2 = (15.0 / cfg.range_bin_size()).round() as usize;
        // Both expected bins dominate their neighborhoods.
        assert!(mags[b1] > 10.0 * mags[(b1 + b2) / 2]);
        assert!(mags[b2] > 10.0 * mags[(b1 + b2) / 2]);
    }

    #[test]
    fn doppler_fft_static_target_lands_in_center_bin() {
        let cube = tone_cube(8.0, 0.0, 0.0);
        let ranged = range_fft(&cube, Window::Rect).unwrap();
        let dop = doppler_fft(&ranged).unwrap();
        let n_chirp = cube.meta.chirps_per_frame;
        let range_bin = (8.0 / cube.meta.range_bin_size()).round() as usize;
        let (peak, _) = (0..n_chirp)
            .map(|d| (d, dop[[d, range_bin, 0]].norm()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(peak, n_chirp / 2);
    }

    #[test]
    fn doppler_fft_quarter_turn_phase_step_maps_to_expected_velocity() {
        // dphi_v = pi/2 per chirp with T_c = 50 us -> v = lambda/(8*T_c).
        let cfg = WaveformConfig::default();
        let v = cfg.wavelength() / (8.0 * cfg.chirp_duration_s);
        assert!((v - 9.74).abs() < 0.01, "closed-form check {v}");
        let cube = tone_cube(8.0, 0.0, v);
        let ranged = range_fft(&cube, Window::Rect).unwrap();
        let dop = doppler_fft(&ranged).unwrap();
        let n_chirp = cfg.chirps_per_frame;
        let range_bin = (8.0 / cfg.range_bin_size()).round() as usize;
        let (peak, _) = (0..n_chirp)
            .map(|d| (d, dop[[d, range_bin, 0]].norm()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        // dphi per bin is 2*pi/64, so a pi/2 step lands 16 bins right of center.
        assert_eq!(peak, n_chirp / 2 + n_chirp / 4);
        // And the bin maps back to the closed-form velocity.
        let v_hat = (peak as f64 - n_chirp as f64 / 2.0) * cfg.velocity_bin_size();
        assert!((v_hat - v).abs() <= cfg.velocity_bin_size() / 2.0);
    }

    #[test]
    fn doppler_fft_symmetric_velocities_make_symmetric_bins() {
        let cfg = WaveformConfig::default();
        let v = 4.0;
        let scene = scene_with(vec![
            Scatterer {
                range_m: 8.0,
                azimuth_rad: 0.0,
                reflectivity: 1.0,
                radial_velocity_mps: v,
            },
            Scatterer {
                range_m: 8.0,
                azimuth_rad: 0.0,
                reflectivity: 1.0,
                radial_velocity_mps: -v,
            },
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cube: RadarCube<f64> = simulate_frame(&scene, &cfg, 0.0, &mut rng).unwrap();
        let dop = doppler_fft(&range_fft(&cube, Window::Rect).unwrap()).unwrap();
        let n = cfg.chirps_per_frame;
        let range_bin = (8.0 / cfg.range_bin_size()).round() as usize;
        let mags: Vec<f64> = (0..n).map(|d| dop[[d, range_bin, 0]].norm()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| mags[b].partial_cmp(&mags[a]).unwrap());
        let (top1, top2) = (order[0] as i64, order[1] as i64);
        let center = n as i64 / 2;
        assert_eq!(top1 - center, -(top2 - center), "bins {top1} {top2}");
    }

    #[test]
    fn angle_fft_boresight_is_center_and_30_degrees_matches_formula() {
        let cube = tone_cube(8.0, 0.0, 0.0);
        let ranged = range_fft(&cube, Window::Rect).unwrap();
        let angled = angle_fft(&ranged, 64).unwrap();
        let range_bin = (8.0 / cube.meta.range_bin_size()).round() as usize;
        let (peak, _) = (0..64)
            .map(|k| (k, angled[[0, range_bin, k]].norm()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(peak, 32);

        // dphi_a = pi/2 <-> theta = asin(0.5) = 30 degrees -> sin grid bin 32 + 64/4.
        let cube = tone_cube(8.0, 30f64.to_radians(), 0.0);
        let angled = angle_fft(&range_fft(&cube, Window::Rect).unwrap(), 64).unwrap();
        let (peak, _) = (0..64)
            .map(|k| (k, angled[[0, range_bin, k]].norm()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(peak, 32 + 16);
        let theta = angle_bin_centers(64)[peak];
        assert!((theta.to_degrees() - 30.0).abs() < 1.0);
    }

    #[test]
    fn angle_fft_rejects_too_few_bins() {
        let cube = tone_cube(8.0, 0.0, 0.0);
        let ranged = range_fft(&cube, Window::Rect).unwrap();
        assert!(matches!(
            angle_fft(&ranged, 4),
            Err(Error::Config(_))
        ));
        assert!(matches!(angle_fft(&ranged, 24), Err(Error::Config(_))));
    }

    #[test]
    fn angular_resolution_matches_single_chip_figures() {
        let az = angular_resolution(8, 0.5, 0.0).to_degrees();
        let el = angular_resolution(2, 0.5, 0.0).to_degrees();
        assert!((az - 14.0).abs() < 0.5, "azimuth {az}");
        assert!((el - 57.0).abs() < 0.5, "elevation {el}");
    }

    #[test]
    fn make_rah_normalizes_and_peaks_at_scatterer_cell() {
        let cfg = WaveformConfig::default();
        let cube = tone_cube(5.0, 30f64.to_radians(), 0.0);
        let rah = make_rah(&cube, &RahParams::default()).unwrap();
        assert!(rah.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (argmax, _) = rah
            .values
            .indexed_iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let expect_row = (5.0 / cfg.range_bin_size()).round() as usize;
        let expect_col = 32 + 16;
        assert_eq!(argmax, (expect_row, expect_col));
    }

    #[test]
    fn make_rah_empty_noise_free_scene_hits_min_max_rule() {
        let cfg = WaveformConfig::default();
        let scene = scene_with(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cube: RadarCube<f64> = simulate_frame(&scene, &cfg, 0.0, &mut rng).unwrap();
        let rah = make_rah(&cube, &RahParams::default()).unwrap();
        assert!(rah.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn make_rah_is_scatterer_order_invariant() {
        let cfg = WaveformConfig::default();
        let mut scatterers = vec![
            Scatterer {
                range_m: 4.0,
                azimuth_rad: 0.2,
                reflectivity: 1.0,
                radial_velocity_mps: 0.0,
            },
            Scatterer {
                range_m: 9.0,
                azimuth_rad: -0.5,
                reflectivity: 0.7,
                radial_velocity_mps: 1.0,
            },
            Scatterer {
                range_m: 6.5,
                azimuth_rad: 0.0,
                reflectivity: 1.3,
                radial_velocity_mps: -2.0,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: RadarCube<f64> =
            simulate_frame(&scene_with(scatterers.clone()), &cfg, 0.0, &mut rng).unwrap();
        scatterers.reverse();
        let b: RadarCube<f64> =
            simulate_frame(&scene_with(scatterers), &cfg, 0.0, &mut rng).unwrap();
        let ra = make_rah(&a, &RahParams::default()).unwrap();
        let rb = make_rah(&b, &RahParams::default()).unwrap();
        let max_diff = ra
            .values
            .iter()
            .zip(rb.values.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "max diff {max_diff}");
    }

    #[test]
    fn make_rdh_static_scene_concentrates_in_center_column() {
        let cube = tone_cube(8.0, 0.0, 0.0);
        let rdh = make_rdh(&cube, Window::Rect).unwrap();
        let n_chirp = cube.meta.chirps_per_frame;
        let range_bin = (8.0 / cube.meta.range_bin_size()).round() as usize;
        let row = rdh.values.row(range_bin);
        let (peak, _) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(peak, n_chirp / 2);

        let moving = tone_cube(8.0, 0.0, 5.0);
        let rdh = make_rdh(&moving, Window::Rect).unwrap();
        let row = rdh.values.row(range_bin);
        let (peak, _) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_ne!(peak, n_chirp / 2);
    }

    #[test]
    fn noise_only_rdh_magnitudes_respect_gaussian_tails() {
        // Small cube so 10k trials stay fast: magnitudes after unitary FFTs
        // of complex Gaussian noise stay Rayleigh, whose mean + 6 sigma is
        // exceeded per cell with p ~ 1.5e-6. With 128 cells per trial the
        // per-trial exceedance probability is ~2e-4.
        let cfg = WaveformConfig {
            samples_per_chirp: 16,
            chirps_per_frame: 16,
            n_tx: 1,
            n_rx: 1,
            ..WaveformConfig::default()
        };
        let scene = Scene {
            kind: SceneKind::Corridor,
            seed: 0,
            extent: Extent::default(),
            scatterers: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 10_000;
        let mut exceeding_trials = 0usize;
        for _ in 0..trials {
            let cube: RadarCube<f64> = simulate_frame(&scene, &cfg, 1.0, &mut rng).unwrap();
            let mag = magnitude_rdh(&cube, Window::Rect).unwrap();
            let n = mag.len() as f64;
            let mean = mag.iter().copied().sum::<f64>() / n;
            let var = mag.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let limit = mean + 6.0 * var.sqrt();
            if mag.iter().any(|&v| v > limit) {
                exceeding_trials += 1;
            }
        }
        // Expected ~2 exceedance trials in 1e4; allow generous slack.
        assert!(
            exceeding_trials <= 40,
            "too many 6-sigma exceedances: {exceeding_trials}"
        );
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let cfg = WaveformConfig::default();
        let mut data = Array3::<Complex<f64>>::zeros((4, 16, 2));
        data[[0, 0, 0]] = Complex::new(f64::NAN, 0.0);
        let cube = RadarCube { data, meta: cfg };
        assert!(matches!(
            range_fft(&cube, Window::Rect),
            Err(Error::Numeric(_))
        ));
    }
}
