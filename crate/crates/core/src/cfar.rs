//! Constant false alarm rate detectors over 2D maps.
//!
//! Both variants are ratio tests: a cell under test fires when its value
//! exceeds `alpha` times a local noise estimate taken from a cross-shaped
//! training ring (guard band excluded). Cell averaging uses the ring mean;
//! ordered statistics uses the k-th smallest ring value, which survives
//! interfering targets inside the ring.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, PointCloud2D};
use crate::num::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfarVariant {
    /// Cell-averaging: noise estimate is the mean of the training ring.
    Ca,
    /// Ordered-statistic: noise estimate is the k-th smallest ring value.
    Os,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfarConfig {
    pub variant: CfarVariant,
    /// Training cells per side per axis.
    pub train_cells: usize,
    /// Guard cells per side per axis.
    pub guard_cells: usize,
    /// 1-based order statistic rank (OS only).
    pub os_rank: usize,
    /// Threshold multiplier alpha > 0.
    pub scale_factor: f64,
}

impl CfarConfig {
    /// Total training cells in the cross-shaped ring: four arms of
    /// `train_cells` each.
    pub fn n_training(&self) -> usize {
        4 * self.train_cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_cells < 1 {
            return Err(Error::Config("train_cells must be >= 1".into()));
        }
        if !(self.scale_factor > 0.0) {
            return Err(Error::Config("scale_factor must be > 0".into()));
        }
        if self.variant == CfarVariant::Os
            && !(1..=self.n_training()).contains(&self.os_rank)
        {
            return Err(Error::Config(format!(
                "os_rank {} outside 1..={}",
                self.os_rank,
                self.n_training()
            )));
        }
        Ok(())
    }

    /// Textbook defaults: 8 training and 2 guard cells per side, OS rank at
    /// three quarters of the ring, alpha solved for the requested false-alarm
    /// probability on exponential (power-law) noise.
    pub fn from_design_pfa(variant: CfarVariant, pfa: f64) -> Self {
        let train_cells = 8;
        let guard_cells = 2;
        let n = 4 * train_cells;
        let os_rank = (3 * n) / 4;
        let scale_factor = match variant {
            CfarVariant::Ca => ca_alpha_for_pfa(n, pfa),
            CfarVariant::Os => os_alpha_for_pfa(n, os_rank, pfa, 400_000, 0x05cfa),
        };
        Self {
            variant,
            train_cells,
            guard_cells,
            os_rank,
            scale_factor,
        }
    }
}

/// One detection in heatmap coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub range_bin: usize,
    pub azimuth_bin: usize,
    /// Value of the detected cell in the input's units.
    pub magnitude: T,
    /// Cell value over noise estimate; infinite when the estimate is zero.
    pub snr_estimate: T,
}

/// Closed-form CA-CFAR threshold for a design `pfa` on exponential noise
/// power with `n` training cells: `alpha = n * (pfa^(-1/n) - 1)`.
pub fn ca_alpha_for_pfa(n: usize, pfa: f64) -> f64 {
    let n = n as f64;
    n * (pfa.powf(-1.0 / n) - 1.0)
}

/// Closed-form OS-CFAR false-alarm probability on exponential noise:
/// `prod_{i=0}^{k-1} (n - i) / (n - i + alpha)`.
pub fn os_pfa_for_alpha(n: usize, k: usize, alpha: f64) -> f64 {
    (0..k)
        .map(|i| {
            let m = (n - i) as f64;
            m / (m + alpha)
        })
        .product()
}

/// Monte Carlo calibration of the OS-CFAR threshold: draw `samples` windows
/// of `n` unit exponentials, form the ratio of a fresh cell to the k-th
/// order statistic, and take the `(1 - pfa)` quantile.
pub fn os_alpha_for_pfa(n: usize, k: usize, pfa: f64, samples: usize, seed: u64) -> f64 {
    assert!(k >= 1 && k <= n, "rank out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios: Vec<f64> = Vec::with_capacity(samples);
    let mut window = vec![0.0f64; n];
    for _ in 0..samples {
        for w in window.iter_mut() {
            *w = -(1.0 - rng.random::<f64>()).ln();
        }
        window.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let noise = window[k - 1];
        let cut = -(1.0 - rng.random::<f64>()).ln();
        ratios.push(cut / noise);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (((1.0 - pfa) * samples as f64).floor() as usize).min(samples - 1);
    ratios[idx]
}

/// Run 2D CFAR over `values`.
///
/// Border cells whose full window does not fit are skipped. A zero noise
/// estimate detects the cell iff its value is positive.
pub fn cfar_2d<T: Float>(values: ArrayView2<T>, cfg: &CfarConfig) -> Result<Vec<Detection<T>>> {
    cfg.validate()?;
    let (rows, cols) = values.dim();
    let reach = cfg.guard_cells + cfg.train_cells;
    if rows <= 2 * reach || cols <= 2 * reach {
        return Err(Error::Config(format!(
            "heatmap {rows}x{cols} smaller than CFAR window (reach {reach})"
        )));
    }
    let alpha = crate::num::real::<T>(cfg.scale_factor);
    let mut ring: Vec<T> = Vec::with_capacity(cfg.n_training());
    let mut detections = Vec::new();
    for r in reach..rows - reach {
        for c in reach..cols - reach {
            ring.clear();
            for off in cfg.guard_cells + 1..=reach {
                ring.push(values[[r - off, c]]);
                ring.push(values[[r + off, c]]);
                ring.push(values[[r, c - off]]);
                ring.push(values[[r, c + off]]);
            }
            let noise = match cfg.variant {
                CfarVariant::Ca => {
                    let sum: T = ring.iter().copied().sum();
                    sum / crate::num::real::<T>(ring.len() as f64)
                }
                CfarVariant::Os => {
                    ring.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    ring[cfg.os_rank - 1]
                }
            };
            let cut = values[[r, c]];
            let detected = if noise == T::zero() {
                cut > T::zero()
            } else {
                cut > alpha * noise
            };
            if detected {
                let snr = if noise == T::zero() {
                    T::infinity()
                } else {
                    cut / noise
                };
                detections.push(Detection {
                    range_bin: r,
                    azimuth_bin: c,
                    magnitude: cut,
                    snr_estimate: snr,
                });
            }
        }
    }
    Ok(detections)
}

/// Map detections to Cartesian points through the heatmap bin metadata:
/// `r = bin * range_bin_size`, `theta = azimuth_centers[bin]`.
pub fn detections_to_points<T: Float>(
    detections: &[Detection<T>],
    range_bin_size_m: f64,
    azimuth_centers_rad: &[f64],
    frame_id: u64,
) -> PointCloud2D<f64> {
    let points = detections
        .iter()
        .map(|d| {
            let r = d.range_bin as f64 * range_bin_size_m;
            let az = azimuth_centers_rad[d.azimuth_bin];
            Point2 {
                x: r * az.cos(),
                y: r * az.sin(),
            }
        })
        .collect();
    PointCloud2D { points, frame_id }
}
