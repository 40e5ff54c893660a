//! Noise schedule, forward corruption, and the deterministic reverse-time
//! sampler.
//!
//! The corruption process is variance-exploding: `x_sigma = x0 + sigma * n`.
//! Sampling integrates the probability-flow form of the reverse process,
//! `dx/dsigma = (x - D(x; sigma, c)) / sigma`, with Heun's second-order
//! method over a power-law sigma grid and a plain Euler step onto sigma = 0.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{real, Float};

/// Power-law noise grid plus the training-noise distribution parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub sigma_data: f64,
    /// Mean of ln(sigma) for training draws.
    pub p_mean: f64,
    /// Std of ln(sigma) for training draws.
    pub p_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            n_steps: 80,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl NoiseSchedule {
    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(Error::Config("need 0 < sigma_min < sigma_max".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if !(self.rho > 0.0) || !(self.sigma_data > 0.0) || !(self.p_std > 0.0) {
            return Err(Error::Config("rho, sigma_data, p_std must be > 0".into()));
        }
        Ok(())
    }

    /// Strictly decreasing grid `sigma_0 = sigma_max .. sigma_{N-1} =
    /// sigma_min`; endpoints are exact by construction.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        if n == 1 {
            return vec![self.sigma_max];
        }
        let inv_rho = 1.0 / self.rho;
        let a = self.sigma_max.powf(inv_rho);
        let b = self.sigma_min.powf(inv_rho);
        (0..n)
            .map(|i| {
                if i == 0 {
                    self.sigma_max
                } else if i == n - 1 {
                    self.sigma_min
                } else {
                    let t = i as f64 / (n - 1) as f64;
                    (a + t * (b - a)).powf(self.rho)
                }
            })
            .collect()
    }

    /// FNV-1a hash over the schedule constants; stored in checkpoints so a
    /// model is never sampled under a different schedule unnoticed.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&self.sigma_min.to_le_bytes());
        eat(&self.sigma_max.to_le_bytes());
        eat(&self.rho.to_le_bytes());
        eat(&(self.n_steps as u64).to_le_bytes());
        eat(&self.sigma_data.to_le_bytes());
        eat(&self.p_mean.to_le_bytes());
        eat(&self.p_std.to_le_bytes());
        h
    }
}

/// The pluggable clean-image predictor `D(x_t; sigma, c)`.
pub trait Denoiser<T: Float>: Sync {
    /// Predict the clean image from `x_t` at noise level `sigma`, optionally
    /// conditioned on `cond`. Output shape equals input shape.
    fn predict(&self, x_t: &Array2<T>, sigma: T, cond: Option<&Array2<T>>) -> Result<Array2<T>>;
}

/// Exact posterior-mean denoiser for per-element Gaussian data
/// `x0 ~ N(mean, var)`: `D(x; sigma) = (var*x + sigma^2*mean)/(var + sigma^2)`.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser<T: Float> {
    pub mean: Array2<T>,
    pub var: Array2<T>,
}

impl<T: Float> AnalyticGaussianDenoiser<T> {
    pub fn new(mean: Array2<T>, var: Array2<T>) -> Result<Self> {
        if mean.dim() != var.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                mean.dim(),
                var.dim()
            )));
        }
        if var.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::Config("variances must be positive".into()));
        }
        Ok(Self { mean, var })
    }

    /// Scalar-distribution convenience used by verification code.
    pub fn scalar(mean: f64, var: f64) -> Self {
        Self::uniform((1, 1), mean, var)
    }

    /// Same mean and variance at every pixel of an (h, w) image.
    pub fn uniform(shape: (usize, usize), mean: f64, var: f64) -> Self {
        Self {
            mean: Array2::from_elem(shape, real::<T>(mean)),
            var: Array2::from_elem(shape, real::<T>(var)),
        }
    }
}

impl<T: Float> Denoiser<T> for AnalyticGaussianDenoiser<T> {
    fn predict(&self, x_t: &Array2<T>, sigma: T, _cond: Option<&Array2<T>>) -> Result<Array2<T>> {
        if x_t.dim() != self.mean.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                x_t.dim(),
                self.mean.dim()
            )));
        }
        let s2 = sigma * sigma;
        let mut out = Array2::<T>::zeros(x_t.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(x_t)
            .and(&self.mean)
            .and(&self.var)
            .for_each(|o, &x, &mu, &v| {
                *o = (v * x + s2 * mu) / (v + s2);
            });
        Ok(out)
    }
}

/// Corrupt `x0` to `x_sigma = x0 + sigma * n` with seeded standard noise.
pub fn add_noise<T: Float>(x0: &Array2<T>, sigma: T, rng: &mut ChaCha8Rng) -> Array2<T> {
    let mut out = x0.clone();
    if sigma == T::zero() {
        return out;
    }
    for v in out.iter_mut() {
        *v += sigma * T::standard_normal(rng);
    }
    out
}

/// Draw a training noise level: `ln(sigma) ~ N(p_mean, p_std^2)`.
pub fn sample_training_sigma<T: Float>(schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> T {
    let z: f64 = f64::standard_normal(rng);
    real::<T>((schedule.p_mean + schedule.p_std * z).exp())
}

/// One row of the optional sampler trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub sigma: f64,
    pub x_norm: f64,
    pub denoised_norm: f64,
}

fn l2_norm<T: Float>(x: &Array2<T>) -> f64 {
    x.iter()
        .map(|v| {
            let f = v.to_f64().unwrap();
            f * f
        })
        .sum::<f64>()
        .sqrt()
}

/// Deterministic reverse-process sampler.
///
/// Starts from `sigma_max * n`, runs Heun steps down the sigma grid and a
/// final Euler step to zero. Output is unclamped; occupancy clamping is the
/// caller's concern.
pub fn heun_sample<T: Float>(
    denoiser: &dyn Denoiser<T>,
    cond: Option<&Array2<T>>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Array2<T>> {
    heun_sample_opts(denoiser, cond, shape, schedule, rng, trace, None)
}

/// [`heun_sample`] with the denoised estimates clipped to a value range at
/// every step. Image pipelines pass `(0, 1)` so the trajectory cannot
/// accumulate out-of-range overshoot; verification against unbounded
/// analytic targets passes `None`.
pub fn heun_sample_opts<T: Float>(
    denoiser: &dyn Denoiser<T>,
    cond: Option<&Array2<T>>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut Vec<TraceRow>>,
    clip_denoised: Option<(T, T)>,
) -> Result<Array2<T>> {
    schedule.validate()?;
    let grid = schedule.sigma_grid();
    let sigma_max = real::<T>(schedule.sigma_max);
    let mut x = Array2::<T>::zeros(shape);
    for v in x.iter_mut() {
        *v = sigma_max * T::standard_normal(rng);
    }

    for i in 0..grid.len() {
        let sigma = real::<T>(grid[i]);
        let sigma_next = if i + 1 < grid.len() {
            real::<T>(grid[i + 1])
        } else {
            T::zero()
        };
        let mut denoised = denoiser.predict(&x, sigma, cond)?;
        if let Some((lo, hi)) = clip_denoised {
            denoised.mapv_inplace(|v| v.max(lo).min(hi));
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow {
                step: i,
                sigma: grid[i],
                x_norm: l2_norm(&x),
                denoised_norm: l2_norm(&denoised),
            });
        }
        let dt = sigma_next - sigma;
        // d = (x - D)/sigma; the Euler predictor is written as
        // D + (x - D) * (sigma_next/sigma) so the final step to zero noise
        // returns the denoiser output exactly.
        let mut d = &x - &denoised;
        d.mapv_inplace(|v| v / sigma);
        let ratio = sigma_next / sigma;
        let mut x_next =
            ndarray::Zip::from(&x).and(&denoised).map_collect(|&xv, &dv| dv + (xv - dv) * ratio);
        if sigma_next > T::zero() {
            let mut denoised2 = denoiser.predict(&x_next, sigma_next, cond)?;
            if let Some((lo, hi)) = clip_denoised {
                denoised2.mapv_inplace(|v| v.max(lo).min(hi));
            }
            let mut d2 = &x_next - &denoised2;
            d2.mapv_inplace(|v| v / sigma_next);
            let half = real::<T>(0.5);
            x_next = &x + &ndarray::Zip::from(&d).and(&d2).map_collect(|&a, &b| (a + b) * half * dt);
        }
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sample at step {i} (sigma {})",
                grid[i]
            )));
        }
        x = x_next;
    }
    Ok(x)
}

/// Score estimate `(D(x; sigma) - x)/sigma^2`.
pub fn denoising_score<T: Float>(
    denoiser: &dyn Denoiser<T>,
    x: &Array2<T>,
    sigma: T,
    cond: Option<&Array2<T>>,
) -> Result<Array2<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::Domain("score requires sigma > 0".into()));
    }
    let d = denoiser.predict(x, sigma, cond)?;
    let s2 = sigma * sigma;
    Ok(ndarray::Zip::from(&d).and(x).map_collect(|&dv, &xv| (dv - xv) / s2))
}
