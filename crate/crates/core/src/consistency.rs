//! Consistency model: boundary-anchored one-step generator distilled from a
//! diffusion teacher.
//!
//! The parameterization `f(x, sigma, c) = c_skip(sigma)*x +
//! c_out(sigma)*F(...)` uses `c_skip = sd^2/((sigma-sigma_eps)^2 + sd^2)`
//! and `c_out = sd*(sigma-sigma_eps)/sqrt(sd^2 + sigma^2)`, so the boundary
//! identity `f(x, sigma_eps) = x` holds exactly for any weights.
//! Distillation matches the student at a noisy grid point against an EMA
//! target evaluated at the teacher's one-step ODE move toward the data.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{edm_coeffs, EdmDenoiser};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{perceptual_distance_with_grad, Adam, FeatureNet, GradSet, TinyUNet, UNetCache};
use crate::num::{real, Float};

/// Distance used to compare student and target outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMetric {
    L2,
    Perceptual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// EMA decay of the target network.
    pub ema_decay: f64,
    /// Number of grid points the distillation steps over.
    pub grid_size: usize,
    pub metric: DistillMetric,
    pub steps: usize,
    /// Clip the teacher's denoised estimates to [0, 1] during its ODE
    /// move, matching the occupancy sampler used at inference.
    #[serde(default = "default_clip")]
    pub clip_denoised: bool,
}

fn default_clip() -> bool {
    true
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ema_decay: 0.999,
            grid_size: 18,
            metric: DistillMetric::L2,
            steps: 2000,
            clip_denoised: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("distill grid needs >= 2 points".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Consistency model sharing the teacher's network topology.
#[derive(Debug, Clone)]
pub struct ConsistencyModel<T: Float> {
    pub net: TinyUNet<T>,
    pub sigma_data: T,
    pub sigma_eps: T,
    pub sigma_max: T,
}

pub struct ConsistencyCache<T: Float> {
    unet: UNetCache<T>,
    c_out: T,
}

impl<T: Float> ConsistencyModel<T> {
    pub fn new(net: TinyUNet<T>, schedule: &NoiseSchedule) -> Self {
        Self {
            net,
            sigma_data: real(schedule.sigma_data),
            sigma_eps: real(schedule.sigma_min),
            sigma_max: real(schedule.sigma_max),
        }
    }

    /// Student initialized from the teacher's weights.
    pub fn from_teacher(teacher: &EdmDenoiser<T>, schedule: &NoiseSchedule) -> Self {
        Self::new(teacher.net.clone(), schedule)
    }

    fn coeffs(&self, sigma: T) -> (T, T, T, T) {
        let shifted = sigma - self.sigma_eps;
        let d2 = self.sigma_data * self.sigma_data;
        let c_skip = d2 / (shifted * shifted + d2);
        let c_out = self.sigma_data * shifted / (d2 + sigma * sigma).sqrt();
        let base = edm_coeffs(sigma, self.sigma_data);
        (c_skip, c_out, base.c_in, base.c_noise)
    }

    fn check_sigma(&self, sigma: T) -> Result<()> {
        if sigma < self.sigma_eps || sigma > self.sigma_max {
            return Err(Error::Domain(format!(
                "sigma {sigma} outside [{}, {}]",
                self.sigma_eps, self.sigma_max
            )));
        }
        Ok(())
    }

    /// `f(x_t, sigma, c)`: the consistency map toward the clean image.
    pub fn forward(
        &self,
        x_t: &Array2<T>,
        sigma: T,
        cond: Option<&Array2<T>>,
    ) -> Result<Array2<T>> {
        Ok(self.forward_cached(x_t, sigma, cond)?.0)
    }

    pub fn forward_cached(
        &self,
        x_t: &Array2<T>,
        sigma: T,
        cond: Option<&Array2<T>>,
    ) -> Result<(Array2<T>, ConsistencyCache<T>)> {
        self.check_sigma(sigma)?;
        let (c_skip, c_out, c_in, c_noise) = self.coeffs(sigma);
        let (h, w) = x_t.dim();
        let cond_ch = self.net.cfg.cond_channels;
        let mut stacked = Array3::<T>::zeros((self.net.cfg.data_channels + cond_ch, h, w));
        {
            let mut plane = stacked.index_axis_mut(Axis(0), 0);
            plane.assign(x_t);
            plane.mapv_inplace(|v| v * c_in);
        }
        if cond_ch > 0 {
            let c = cond.ok_or_else(|| {
                Error::ShapeMismatch("model built with a condition channel but none given".into())
            })?;
            if c.dim() != x_t.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "condition {:?} vs input {:?}",
                    c.dim(),
                    x_t.dim()
                )));
            }
            stacked.index_axis_mut(Axis(0), 1).assign(c);
        }
        let (raw, cache) = self.net.forward(&stacked, c_noise);
        let raw2 = raw.index_axis(Axis(0), 0);
        let mut out = x_t.mapv(|v| v * c_skip);
        ndarray::Zip::from(&mut out).and(&raw2).for_each(|o, &f| {
            *o += c_out * f;
        });
        Ok((
            out,
            ConsistencyCache {
                unet: cache,
                c_out,
            },
        ))
    }

    pub fn backward(&self, cache: &ConsistencyCache<T>, g_out: &Array2<T>) -> GradSet<T> {
        let (h, w) = g_out.dim();
        let mut g_raw = Array3::<T>::zeros((1, h, w));
        ndarray::Zip::from(g_raw.index_axis_mut(Axis(0), 0))
            .and(g_out)
            .for_each(|o, &g| *o = g * cache.c_out);
        self.net.backward(&cache.unet, &g_raw)
    }
}

/// Descending distillation grid without a terminal zero.
pub fn distill_grid(schedule: &NoiseSchedule, grid_size: usize) -> Vec<f64> {
    NoiseSchedule {
        n_steps: grid_size,
        ..schedule.clone()
    }
    .sigma_grid()
}

/// One teacher ODE (Heun) move from `sigma_hi` down to `sigma_lo`.
fn teacher_step<T: Float>(
    teacher: &EdmDenoiser<T>,
    x: &Array2<T>,
    sigma_hi: T,
    sigma_lo: T,
    cond: Option<&Array2<T>>,
    clip: bool,
) -> Result<Array2<T>> {
    let clamp = |mut d: Array2<T>| {
        if clip {
            d.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
        }
        d
    };
    let denoised = clamp(teacher.predict(x, sigma_hi, cond)?);
    let mut d = x - &denoised;
    d.mapv_inplace(|v| v / sigma_hi);
    let dt = sigma_lo - sigma_hi;
    let x_euler = x + &d.mapv(|v| v * dt);
    let denoised2 = clamp(teacher.predict(&x_euler, sigma_lo, cond)?);
    let mut d2 = &x_euler - &denoised2;
    d2.mapv_inplace(|v| v / sigma_lo);
    let half = real::<T>(0.5);
    Ok(x + &ndarray::Zip::from(&d).and(&d2).map_collect(|&a, &b| (a + b) * half * dt))
}

/// One distillation step over a batch of `(x0, condition)` pairs.
///
/// Returns the pre-update loss; updates the student by gradient and the
/// target by EMA.
#[allow(clippy::too_many_arguments)]
pub fn distill_step<T: Float>(
    student: &mut ConsistencyModel<T>,
    target: &mut ConsistencyModel<T>,
    teacher: &EdmDenoiser<T>,
    fp: &FeatureNet<T>,
    batch: &[(&Array2<T>, &Array2<T>)],
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    opt: &mut Adam<T>,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty distillation batch".into()));
    }
    let grid = distill_grid(schedule, cfg.grid_size);

    // Randomness drawn up front for thread-count independence.
    let prepared: Vec<(usize, Array2<T>)> = batch
        .iter()
        .map(|(x0, _)| {
            let i = rng.random_range(0..grid.len() - 1);
            let sigma_hi = real::<T>(grid[i]);
            let x_hi = crate::diffusion::add_noise(x0, sigma_hi, rng);
            (i, x_hi)
        })
        .collect();

    let student_ref = &*student;
    let target_ref = &*target;
    let results: Vec<Result<(T, GradSet<T>)>> = prepared
        .par_iter()
        .zip(batch.par_iter())
        .map(|((i, x_hi), (_, cond))| {
            let sigma_hi = real::<T>(grid[*i]);
            let sigma_lo = real::<T>(grid[*i + 1]);
            let x_lo = teacher_step(teacher, x_hi, sigma_hi, sigma_lo, Some(cond), cfg.clip_denoised)?;
            let (student_out, cache) = student_ref.forward_cached(x_hi, sigma_hi, Some(cond))?;
            let target_out = target_ref.forward(&x_lo, sigma_lo, Some(cond))?;
            let (loss, g) = match cfg.metric {
                DistillMetric::L2 => {
                    let numel = real::<T>(student_out.len() as f64);
                    let mut loss = T::zero();
                    let mut g = Array2::<T>::zeros(student_out.raw_dim());
                    ndarray::Zip::from(&mut g)
                        .and(&student_out)
                        .and(&target_out)
                        .for_each(|g, &s, &t| {
                            let d = s - t;
                            loss += d * d;
                            *g = real::<T>(2.0) * d / numel;
                        });
                    (loss / numel, g)
                }
                DistillMetric::Perceptual => {
                    let to3 = |a: &Array2<T>| {
                        let (h, w) = a.dim();
                        let mut out = Array3::<T>::zeros((1, h, w));
                        out.index_axis_mut(Axis(0), 0).assign(a);
                        out
                    };
                    let (loss, g3) =
                        perceptual_distance_with_grad(fp, &to3(&student_out), &to3(&target_out))?;
                    (loss, g3.index_axis(Axis(0), 0).to_owned())
                }
            };
            let grads = student_ref.backward(&cache, &g);
            Ok((loss, grads))
        })
        .collect();

    let mut total = T::zero();
    let mut acc: Option<GradSet<T>> = None;
    for (i, r) in results.into_iter().enumerate() {
        let (loss, grads) = r?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite distillation loss at batch index {i}"
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
    opt.step(&mut student.net.params, &grads);
    target
        .net
        .params
        .ema_from(&student.net.params, real(cfg.ema_decay));
    Ok(total * scale)
}

/// Generate with `k` network calls: consistency jumps alternated with
/// re-noising to intermediate grid levels. `k = 1` is plain one-step
/// generation. The output is clamped to [0, 1].
pub fn multistep_generate<T: Float>(
    model: &ConsistencyModel<T>,
    cond: Option<&Array2<T>>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<T>> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let sigma_max = real::<T>(schedule.sigma_max);
    let mut x = Array2::<T>::zeros(shape);
    for v in x.iter_mut() {
        *v = sigma_max * T::standard_normal(rng);
    }
    let mut out = model.forward(&x, sigma_max, cond)?;
    out.mapv_inplace(|v| v.max(T::zero()).min(T::one()));

    if k > 1 {
        let grid = schedule.sigma_grid();
        for j in 1..k {
            // Intermediate level: subsample the schedule grid uniformly.
            let idx = (j * (grid.len() - 1)) / k;
            let sigma = real::<T>(grid[idx].max(schedule.sigma_min));
            let renoise = (sigma * sigma - model.sigma_eps * model.sigma_eps)
                .max(T::zero())
                .sqrt();
            let mut x_j = out.clone();
            for v in x_j.iter_mut() {
                *v += renoise * T::standard_normal(rng);
            }
            out = model.forward(&x_j, sigma, cond)?;
            out.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
        }
    }
    Ok(out)
}

/// One-call generation from pure noise, clamped to [0, 1].
pub fn one_step_generate<T: Float>(
    model: &ConsistencyModel<T>,
    cond: Option<&Array2<T>>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<T>> {
    multistep_generate(model, cond, shape, schedule, 1, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::UNetConfig;
    use rand::SeedableRng;

    fn tiny_net(seed: u64, cond: usize) -> TinyUNet<f64> {
        TinyUNet::new(
            UNetConfig {
                image_size: 8,
                data_channels: 1,
                cond_channels: cond,
                channels: vec![4, 8],
                emb_dim: 8,
                norm_groups: 2,
                attention: false,
            },
            seed,
        )
        .unwrap()
    }

    fn rand_img(seed: u64, hw: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((hw, hw), |_| f64::standard_normal(&mut rng))
    }

    #[test]
    fn boundary_identity_holds_exactly_for_random_weights() {
        let schedule = NoiseSchedule::default();
        for seed in 0..5 {
            let mut model = ConsistencyModel::new(tiny_net(seed, 1), &schedule);
            // Scatter all parameters, including zero-initialized ones.
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for t in model.net.params.tensors.iter_mut() {
                for v in t.iter_mut() {
                    *v = f64::standard_normal(&mut rng);
                }
            }
            let x = rand_img(seed, 8);
            let c = rand_img(200 + seed, 8);
            let y = model.forward(&x, model.sigma_eps, Some(&c)).unwrap();
            assert_eq!(y, x, "boundary must be the identity, bitwise");
        }
    }

    #[test]
    fn sigma_outside_range_is_a_domain_error() {
        let schedule = NoiseSchedule::default();
        let model = ConsistencyModel::new(tiny_net(0, 1), &schedule);
        let x = rand_img(1, 8);
        let c = rand_img(2, 8);
        assert!(matches!(
            model.forward(&x, 0.001, Some(&c)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            model.forward(&x, 81.0, Some(&c)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn untrained_forward_is_deterministic() {
        let schedule = NoiseSchedule::default();
        let model = ConsistencyModel::new(tiny_net(3, 1), &schedule);
        let x = rand_img(4, 8);
        let c = rand_img(5, 8);
        let a = model.forward(&x, 1.0, Some(&c)).unwrap();
        let b = model.forward(&x, 1.0, Some(&c)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_step_equals_multistep_k1_bitwise() {
        let schedule = NoiseSchedule::default();
        let model = ConsistencyModel::new(tiny_net(6, 1), &schedule);
        let c = rand_img(7, 8);
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let a = one_step_generate(&model, Some(&c), (8, 8), &schedule, &mut r1).unwrap();
        let b = multistep_generate(&model, Some(&c), (8, 8), &schedule, 1, &mut r2).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.dim(), c.dim());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let schedule = NoiseSchedule::default();
        let model = ConsistencyModel::new(tiny_net(9, 1), &schedule);
        let c = rand_img(10, 8);
        let gen = |seed: u64, k: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            multistep_generate(&model, Some(&c), (8, 8), &schedule, k, &mut rng).unwrap()
        };
        assert_eq!(gen(11, 4), gen(11, 4));
        assert_ne!(gen(11, 4), gen(12, 4));
    }

    #[test]
    fn degenerate_grid_and_identical_models_give_zero_loss() {
        // With sigma_hi == sigma_lo the teacher move is the identity and
        // f_theta == f_target, so the loss vanishes.
        let schedule = NoiseSchedule::default();
        let teacher = EdmDenoiser::new(tiny_net(13, 1), schedule.sigma_data);
        let student = ConsistencyModel::from_teacher(&teacher, &schedule);
        let x0 = rand_img(14, 8);
        let cond = rand_img(15, 8);
        let sigma = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x_hi = crate::diffusion::add_noise(&x0, sigma, &mut rng);
        let moved = teacher_step(&teacher, &x_hi, sigma, sigma, Some(&cond), true).unwrap();
        let max_move = moved
            .iter()
            .zip(x_hi.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_move == 0.0, "degenerate teacher step must be identity");
        let s = student.forward(&x_hi, sigma, Some(&cond)).unwrap();
        let t = student.forward(&moved, sigma, Some(&cond)).unwrap();
        let l2: f64 = s
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 64.0;
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn distill_loss_is_nonnegative_and_batch_order_invariant() {
        let schedule = NoiseSchedule::default();
        let teacher = EdmDenoiser::new(tiny_net(17, 1), schedule.sigma_data);
        let fp = FeatureNet::<f64>::shipped();
        let cfg = DistillConfig::default();
        let imgs: Vec<(Array2<f64>, Array2<f64>)> = (0..4)
            .map(|i| (rand_img(20 + i, 8).mapv(f64::abs), rand_img(30 + i, 8)))
            .collect();

        let run = |order: &[usize]| {
            let mut student = ConsistencyModel::from_teacher(&teacher, &schedule);
            let mut target = student.clone();
            let mut opt = Adam::new(&student.net.params, 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(40);
            // Feed in permuted order but with identical per-slot draws: the
            // mean reduction makes the loss order-invariant only when the
            // same (sample, draw) pairs occur; so we permute and also carry
            // the draws by reordering the batch slots identically.
            let batch: Vec<(&Array2<f64>, &Array2<f64>)> =
                order.iter().map(|&i| (&imgs[i].0, &imgs[i].1)).collect();
            
            distill_step(
                &mut student,
                &mut target,
                &teacher,
                &fp,
                &batch,
                &schedule,
                &cfg,
                &mut opt,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(&[0, 1, 2, 3]);
        assert!(a >= 0.0);

        // Order invariance of the mean reduction: swap two equal images.
        let imgs_dup: Vec<(Array2<f64>, Array2<f64>)> = vec![
            imgs[0].clone(),
            imgs[0].clone(),
            imgs[2].clone(),
            imgs[3].clone(),
        ];
        let run_dup = |order: &[usize]| {
            let mut student = ConsistencyModel::from_teacher(&teacher, &schedule);
            let mut target = student.clone();
            let mut opt = Adam::new(&student.net.params, 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            let batch: Vec<(&Array2<f64>, &Array2<f64>)> = order
                .iter()
                .map(|&i| (&imgs_dup[i].0, &imgs_dup[i].1))
                .collect();
            distill_step(
                &mut student,
                &mut target,
                &teacher,
                &fp,
                &batch,
                &schedule,
                &cfg,
                &mut opt,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run_dup(&[0, 1, 2, 3]), run_dup(&[1, 0, 2, 3]));
    }

    #[test]
    fn ema_target_follows_recurrence() {
        let schedule = NoiseSchedule::default();
        let teacher = EdmDenoiser::new(tiny_net(50, 1), schedule.sigma_data);
        let fp = FeatureNet::<f64>::shipped();
        let cfg = DistillConfig {
            ema_decay: 0.9,
            ..DistillConfig::default()
        };
        let mut student = ConsistencyModel::from_teacher(&teacher, &schedule);
        let mut target = student.clone();
        let mut opt = Adam::new(&student.net.params, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x0 = rand_img(52, 8).mapv(f64::abs);
        let cond = rand_img(53, 8);

        // Direct recurrence over recorded student iterates.
        let mut expected: Vec<f64> = student
            .net
            .params
            .tensors
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        for _ in 0..5 {
            distill_step(
                &mut student,
                &mut target,
                &teacher,
                &fp,
                &[(&x0, &cond)],
                &schedule,
                &cfg,
                &mut opt,
                &mut rng,
            )
            .unwrap();
            let current: Vec<f64> = student
                .net
                .params
                .tensors
                .iter()
                .flat_map(|t| t.iter().copied())
                .collect();
            for (e, c) in expected.iter_mut().zip(&current) {
                *e = *e * 0.9 + c * 0.1;
            }
        }
        let got: Vec<f64> = target
            .net
            .params
            .tensors
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }
}
