//! Random-feature perceptual distance.
//!
//! A fixed, never-trained multi-scale convolutional stack stands in for a
//! pretrained feature extractor: three conv+SiLU scales joined by average
//! pooling, with channel vectors unit-normalized at every scale. The
//! distance between two images is the mean squared difference of these
//! features, averaged over scales. Weights are generated from a constant
//! seed so the metric ships with the code.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{avgpool2, avgpool2_backward, silu_backward3, silu_map, Conv2d};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::num::{real, Float};

/// Seed baked into the shipped feature extractor.
pub const FEATURE_NET_SEED: u64 = 0x0fea_70e5;

const NORM_EPS: f64 = 1e-6;

/// Fixed feature extractor `f_p`.
#[derive(Debug, Clone)]
pub struct FeatureNet<T: Float> {
    params: ParamSet<T>,
    convs: Vec<Conv2d>,
}

/// Activations needed to backpropagate through the extractor.
pub struct FeatureCache<T: Float> {
    /// Per scale: (conv input, conv output pre-SiLU, pre-normalize features).
    stages: Vec<(Array3<T>, Array3<T>, Array3<T>)>,
    /// Per scale: unit-normalized features.
    pub features: Vec<Array3<T>>,
}

impl<T: Float> FeatureNet<T> {
    /// The default three-scale extractor for single-channel images.
    pub fn shipped() -> Self {
        Self::new(1, &[8, 12, 16], FEATURE_NET_SEED)
    }

    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut ch = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut params,
                &mut rng,
                &format!("fp{i}"),
                ch,
                w,
                3,
                1,
                false,
            ));
            ch = w;
        }
        Self { params, convs }
    }

    /// Multi-scale unit-normalized features of `x` (single channel, HxW).
    pub fn features(&self, x: &Array3<T>) -> FeatureCache<T> {
        let mut stages = Vec::new();
        let mut features = Vec::new();
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let conv_in = cur.clone();
            let pre = conv.forward(&self.params, &conv_in);
            let act = silu_map(&pre);
            let normed = unit_normalize(&act);
            features.push(normed);
            stages.push((conv_in, pre, act));
            if i + 1 < self.convs.len() {
                cur = avgpool2(&stages[i].2);
            }
        }
        FeatureCache { stages, features }
    }

    /// Gradient of a scalar loss wrt the input image, given per-scale
    /// gradients wrt the normalized features.
    pub fn backward_input(&self, cache: &FeatureCache<T>, g_features: &[Array3<T>]) -> Array3<T> {
        assert_eq!(g_features.len(), self.convs.len());
        let mut g_next: Option<Array3<T>> = None;
        for i in (0..self.convs.len()).rev() {
            let (conv_in, pre, act) = &cache.stages[i];
            let mut g_act = unit_normalize_backward(act, &g_features[i]);
            if let Some(g_pool) = g_next {
                g_act += &avgpool2_backward(&g_pool);
            }
            let g_pre = silu_backward3(pre, &g_act);
            let mut sink = self.params.zero_grads();
            let g_in = self.convs[i].backward(&self.params, conv_in, &g_pre, &mut sink);
            g_next = Some(g_in);
        }
        g_next.unwrap()
    }
}

fn unit_normalize<T: Float>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let eps = real::<T>(NORM_EPS);
    let mut out = Array3::<T>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut sq = T::zero();
            for ch in 0..c {
                let v = x[[ch, i, j]];
                sq += v * v;
            }
            let norm = (sq + eps).sqrt();
            for ch in 0..c {
                out[[ch, i, j]] = x[[ch, i, j]] / norm;
            }
        }
    }
    out
}

fn unit_normalize_backward<T: Float>(x: &Array3<T>, gy: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let eps = real::<T>(NORM_EPS);
    let mut gx = Array3::<T>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut sq = T::zero();
            let mut dot = T::zero();
            for ch in 0..c {
                let v = x[[ch, i, j]];
                sq += v * v;
                dot += gy[[ch, i, j]] * v;
            }
            let norm = (sq + eps).sqrt();
            let n3 = norm * norm * norm;
            for ch in 0..c {
                gx[[ch, i, j]] = gy[[ch, i, j]] / norm - x[[ch, i, j]] * dot / n3;
            }
        }
    }
    gx
}

/// Squared feature distance `||f_p(a) - f_p(b)||^2` averaged over feature
/// elements per scale, then over scales.
pub fn perceptual_distance<T: Float>(
    net: &FeatureNet<T>,
    a: &Array3<T>,
    b: &Array3<T>,
) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let fa = net.features(a);
    let fb = net.features(b);
    let mut total = T::zero();
    for (xa, xb) in fa.features.iter().zip(&fb.features) {
        let mut acc = T::zero();
        for (va, vb) in xa.iter().zip(xb.iter()) {
            let d = *va - *vb;
            acc += d * d;
        }
        total += acc / real::<T>(xa.len() as f64);
    }
    Ok(total / real::<T>(fa.features.len() as f64))
}

/// Perceptual distance together with its gradient wrt `a`.
pub fn perceptual_distance_with_grad<T: Float>(
    net: &FeatureNet<T>,
    a: &Array3<T>,
    b: &Array3<T>,
) -> Result<(T, Array3<T>)> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let fa = net.features(a);
    let fb = net.features(b);
    let n_scales = real::<T>(fa.features.len() as f64);
    let mut total = T::zero();
    let mut g_features = Vec::new();
    for (xa, xb) in fa.features.iter().zip(&fb.features) {
        let numel = real::<T>(xa.len() as f64);
        let mut acc = T::zero();
        let mut g = Array3::<T>::zeros(xa.raw_dim());
        ndarray::Zip::from(&mut g).and(xa).and(xb).for_each(|g, &va, &vb| {
            let d = va - vb;
            acc += d * d;
            *g = real::<T>(2.0) * d / (numel * n_scales);
        });
        total += acc / numel;
        g_features.push(g);
    }
    let grad = net.backward_input(&fa, &g_features);
    Ok((total / n_scales, grad))
}
