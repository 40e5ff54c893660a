//! The trainable clean-image predictor.
//!
//! [`EdmDenoiser`] wraps the U-Net with noise-dependent preconditioning:
//! `D(x; sigma, c) = c_skip(sigma)*x + c_out(sigma)*F(c_in(sigma)*x, c)`
//! with `c_skip = sd^2/(sigma^2+sd^2)`, `c_out = sigma*sd/sqrt(sigma^2+sd^2)`,
//! `c_in = 1/sqrt(sigma^2+sd^2)` and the noise embedding `ln(sigma)/4`.
//! Training corrupts targets with log-normal noise levels and descends a
//! weighted sum of an MSE term and a perceptual-feature term.

use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_training_sigma, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{
    perceptual_distance_with_grad, Adam, FeatureNet, GradSet, TinyUNet, UNetCache,
};
use crate::num::{real, Float};

/// Preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy)]
pub struct EdmCoeffs<T> {
    pub c_skip: T,
    pub c_out: T,
    pub c_in: T,
    pub c_noise: T,
}

pub fn edm_coeffs<T: Float>(sigma: T, sigma_data: T) -> EdmCoeffs<T> {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let denom = (s2 + d2).sqrt();
    EdmCoeffs {
        c_skip: d2 / (s2 + d2),
        c_out: sigma * sigma_data / denom,
        c_in: T::one() / denom,
        c_noise: sigma.ln() / real::<T>(4.0),
    }
}

/// x0-predicting denoiser with EDM preconditioning around a [`TinyUNet`].
#[derive(Debug, Clone)]
pub struct EdmDenoiser<T: Float> {
    pub net: TinyUNet<T>,
    pub sigma_data: T,
}

/// Forward activations needed for one training backward pass.
pub struct DenoiserCache<T: Float> {
    unet: UNetCache<T>,
    c_out: T,
}

impl<T: Float> EdmDenoiser<T> {
    pub fn new(net: TinyUNet<T>, sigma_data: f64) -> Self {
        Self {
            net,
            sigma_data: real(sigma_data),
        }
    }

    fn stack_input(&self, x_in: &Array2<T>, cond: Option<&Array2<T>>) -> Result<Array3<T>> {
        let (h, w) = x_in.dim();
        let cond_ch = self.net.cfg.cond_channels;
        let mut stacked = Array3::<T>::zeros((self.net.cfg.data_channels + cond_ch, h, w));
        stacked.index_axis_mut(Axis(0), 0).assign(x_in);
        if cond_ch > 0 {
            let c = cond.ok_or_else(|| {
                Error::ShapeMismatch("denoiser built with a condition channel but none given".into())
            })?;
            if c.dim() != x_in.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "condition {:?} vs input {:?}",
                    c.dim(),
                    x_in.dim()
                )));
            }
            stacked.index_axis_mut(Axis(0), 1).assign(c);
        }
        Ok(stacked)
    }

    /// Forward pass that keeps the activations for [`Self::backward_train`].
    pub fn forward_train(
        &self,
        x_t: &Array2<T>,
        sigma: T,
        cond: Option<&Array2<T>>,
    ) -> Result<(Array2<T>, DenoiserCache<T>)> {
        let co = edm_coeffs(sigma, self.sigma_data);
        let x_in = x_t.mapv(|v| v * co.c_in);
        let stacked = self.stack_input(&x_in, cond)?;
        let (raw, cache) = self.net.forward(&stacked, co.c_noise);
        let raw2 = raw.index_axis(Axis(0), 0);
        let mut d = x_t.mapv(|v| v * co.c_skip);
        ndarray::Zip::from(&mut d).and(&raw2).for_each(|o, &f| {
            *o += co.c_out * f;
        });
        Ok((
            d,
            DenoiserCache {
                unet: cache,
                c_out: co.c_out,
            },
        ))
    }

    /// Parameter gradients for `d loss / d D = g_d`.
    pub fn backward_train(&self, cache: &DenoiserCache<T>, g_d: &Array2<T>) -> GradSet<T> {
        let (h, w) = g_d.dim();
        let mut g_raw = Array3::<T>::zeros((1, h, w));
        ndarray::Zip::from(g_raw.index_axis_mut(Axis(0), 0))
            .and(g_d)
            .for_each(|o, &g| *o = g * cache.c_out);
        self.net.backward(&cache.unet, &g_raw)
    }
}

impl<T: Float> Denoiser<T> for EdmDenoiser<T> {
    fn predict(&self, x_t: &Array2<T>, sigma: T, cond: Option<&Array2<T>>) -> Result<Array2<T>> {
        if sigma == T::zero() {
            // c_skip -> 1 and c_out -> 0; the network contribution vanishes.
            return Ok(x_t.clone());
        }
        let (d, _) = self.forward_train(x_t, sigma, cond)?;
        Ok(d)
    }
}

/// Weights of the combined training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 0.8,
            lambda_perceptual: 0.2,
        }
    }
}

fn as_plane<T: Float>(x: &Array2<T>) -> Array3<T> {
    let (h, w) = x.dim();
    let mut out = Array3::<T>::zeros((1, h, w));
    out.index_axis_mut(Axis(0), 0).assign(x);
    out
}

/// Loss of one sample and the gradient wrt the prediction.
fn sample_loss<T: Float>(
    fp: &FeatureNet<T>,
    weights: &LossWeights,
    prediction: &Array2<T>,
    target: &Array2<T>,
) -> Result<(T, Array2<T>)> {
    let numel = real::<T>(prediction.len() as f64);
    let lambda_m = real::<T>(weights.lambda_mse);
    let lambda_p = real::<T>(weights.lambda_perceptual);

    let mut mse = T::zero();
    let mut g = Array2::<T>::zeros(prediction.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(prediction)
        .and(target)
        .for_each(|g, &p, &t| {
            let d = p - t;
            mse += d * d;
            *g = lambda_m * real::<T>(2.0) * d / numel;
        });
    mse /= numel;
    let mut loss = lambda_m * mse;

    if weights.lambda_perceptual > 0.0 {
        let (lp, glp) =
            perceptual_distance_with_grad(fp, &as_plane(prediction), &as_plane(target))?;
        loss += lambda_p * lp;
        let glp2 = glp.index_axis(Axis(0), 0);
        ndarray::Zip::from(&mut g).and(&glp2).for_each(|g, &v| {
            *g += lambda_p * v;
        });
    }
    Ok((loss, g))
}

/// One optimizer step on a batch of `(x0, condition)` pairs.
///
/// Noise levels and noise tensors are drawn sequentially from `rng` before
/// the batch is processed in parallel, so results do not depend on thread
/// count. Returns the pre-update loss.
pub fn train_step<T: Float>(
    model: &mut EdmDenoiser<T>,
    opt: &mut Adam<T>,
    fp: &FeatureNet<T>,
    batch: &[(&Array2<T>, &Array2<T>)],
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    if weights.lambda_mse < 0.0 || weights.lambda_perceptual < 0.0 {
        return Err(Error::Config("loss weights must be >= 0".into()));
    }

    // Draw all randomness up front.
    let prepared: Vec<(T, Array2<T>)> = batch
        .iter()
        .map(|(x0, _)| {
            let sigma: T = sample_training_sigma(schedule, rng);
            let x_t = crate::diffusion::add_noise(x0, sigma, rng);
            (sigma, x_t)
        })
        .collect();

    let model_ref = &*model;
    let results: Vec<Result<(T, GradSet<T>, T)>> = prepared
        .par_iter()
        .zip(batch.par_iter())
        .map(|((sigma, x_t), (x0, cond))| {
            let (d, cache) = model_ref.forward_train(x_t, *sigma, Some(cond))?;
            let (loss, g_d) = sample_loss(fp, weights, &d, x0)?;
            let grads = model_ref.backward_train(&cache, &g_d);
            Ok((loss, grads, *sigma))
        })
        .collect();

    let mut total = T::zero();
    let mut acc: Option<GradSet<T>> = None;
    for (i, r) in results.into_iter().enumerate() {
        let (loss, grads, sigma) = r?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss/grads at batch index {i} (sigma {sigma})"
            )));
        }
        total += loss;
        match &mut acc {
            Some(a) => a.add_assign(&grads),
            None => acc = Some(grads),
        }
    }
    let scale = real::<T>(1.0 / batch.len() as f64);
    let mut grads = acc.unwrap();
    grads.scale(scale);
    opt.step(&mut model.net.params, &grads);
    Ok(total * scale)
}

/// Loss of a batch without touching the parameters; used for validation.
pub fn eval_loss<T: Float>(
    model: &EdmDenoiser<T>,
    fp: &FeatureNet<T>,
    batch: &[(&Array2<T>, &Array2<T>)],
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Config("empty validation batch".into()));
    }
    let prepared: Vec<(T, Array2<T>)> = batch
        .iter()
        .map(|(x0, _)| {
            let sigma: T = sample_training_sigma(schedule, rng);
            let x_t = crate::diffusion::add_noise(x0, sigma, rng);
            (sigma, x_t)
        })
        .collect();
    let losses: Vec<Result<T>> = prepared
        .par_iter()
        .zip(batch.par_iter())
        .map(|((sigma, x_t), (x0, cond))| {
            let (d, _) = model.forward_train(x_t, *sigma, Some(cond))?;
            Ok(sample_loss(fp, weights, &d, x0)?.0)
        })
        .collect();
    let mut total = T::zero();
    for l in losses {
        total += l?;
    }
    Ok(total / real::<T>(batch.len() as f64))
}
