//! Conditional U-Net at toy scale.
//!
//! Input is the noisy image concatenated channelwise with its condition;
//! the noise level enters through a sinusoidal embedding fed to every
//! residual block. Three stride-2 stages take 64x64 down to 8x8 with
//! single-head attention at the coarsest resolution, mirroring the usual
//! diffusion U-Net topology at a fraction of the width.

use ndarray::{concatenate, Array1, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    silu, silu_backward3, silu_grad, silu_map, upsample2, upsample2_backward, AttnCache, Conv2d,
    GnStats, GroupNorm, Linear, SelfAttention,
};
use super::params::{GradSet, ParamSet};
use crate::error::{Error, Result};
use crate::num::{real, Float};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Square input resolution; must be divisible by 2^(levels-1).
    pub image_size: usize,
    /// Channels of the image being denoised (1 for BEV occupancy).
    pub data_channels: usize,
    /// Channels of the concatenated condition.
    pub cond_channels: usize,
    /// Feature channels per resolution, coarsest last; length = levels + 1.
    pub channels: Vec<usize>,
    /// Width of the noise-level embedding.
    pub emb_dim: usize,
    /// Group count for all normalization layers.
    pub norm_groups: usize,
    /// Self-attention at the coarsest resolution.
    pub attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            data_channels: 1,
            cond_channels: 1,
            channels: vec![8, 16, 20, 28],
            emb_dim: 32,
            norm_groups: 4,
            attention: true,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config("need at least two channel entries".into()));
        }
        let down_factor = 1usize << self.levels();
        if !self.image_size.is_multiple_of(down_factor) || self.image_size / down_factor == 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                self.levels()
            )));
        }
        for &c in &self.channels {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "channel count {c} must be a positive multiple of norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        if self.emb_dim == 0 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::Config("emb_dim must be positive and even".into()));
        }
        if self.data_channels == 0 {
            return Err(Error::Config("data_channels must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct ResCache<T: Float> {
    x: Array3<T>,
    n1: Array3<T>,
    stats1: GnStats<T>,
    a1: Array3<T>,
    h: Array3<T>,
    n2: Array3<T>,
    stats2: GnStats<T>,
    a2: Array3<T>,
}

impl ResBlock {
    fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
        groups: usize,
    ) -> Self {
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), in_ch, groups);
        let conv1 = Conv2d::new(ps, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, false);
        let emb = Linear::new(ps, rng, &format!("{name}.emb"), emb_dim, out_ch);
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), out_ch, groups);
        // Zero-init the closing conv so each block starts as its skip path.
        let conv2 = Conv2d::new(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, true);
        let skip = if in_ch != out_ch {
            Some(Conv2d::new(
                ps,
                rng,
                &format!("{name}.skip"),
                in_ch,
                out_ch,
                1,
                1,
                false,
            ))
        } else {
            None
        };
        Self {
            norm1,
            conv1,
            emb,
            norm2,
            conv2,
            skip,
        }
    }

    fn forward<T: Float>(
        &self,
        ps: &ParamSet<T>,
        x: &Array3<T>,
        emb_act: &Array1<T>,
    ) -> (Array3<T>, ResCache<T>) {
        let (n1, stats1) = self.norm1.forward(ps, x);
        let a1 = silu_map(&n1);
        let mut h = self.conv1.forward(ps, &a1);
        let e = self.emb.forward(ps, emb_act);
        for (ch, &ev) in e.iter().enumerate() {
            h.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + ev);
        }
        let (n2, stats2) = self.norm2.forward(ps, &h);
        let a2 = silu_map(&n2);
        let mut y = self.conv2.forward(ps, &a2);
        match &self.skip {
            Some(conv) => y += &conv.forward(ps, x),
            None => y += x,
        }
        (
            y,
            ResCache {
                x: x.clone(),
                n1,
                stats1,
                a1,
                h,
                n2,
                stats2,
                a2,
            },
        )
    }

    /// Returns the input gradient; the gradient wrt the activated embedding
    /// vector is accumulated into `g_emb_act`.
    fn backward_with_emb<T: Float>(
        &self,
        ps: &ParamSet<T>,
        cache: &ResCache<T>,
        emb_act: &Array1<T>,
        gy: &Array3<T>,
        grads: &mut GradSet<T>,
        g_emb_act: &mut Array1<T>,
    ) -> Array3<T> {
        let ga2 = self.conv2.backward(ps, &cache.a2, gy, grads);
        let gn2 = silu_backward3(&cache.n2, &ga2);
        let gh = self
            .norm2
            .backward(ps, &cache.h, &cache.stats2, &gn2, grads);

        let out_ch = gh.dim().0;
        let mut ge = Array1::<T>::zeros(out_ch);
        for ch in 0..out_ch {
            let mut acc = T::zero();
            for v in gh.index_axis(Axis(0), ch).iter() {
                acc += *v;
            }
            ge[ch] = acc;
        }
        let g_emb = self.emb.backward(ps, emb_act, &ge, grads);
        *g_emb_act += &g_emb;

        let ga1 = self.conv1.backward(ps, &cache.a1, &gh, grads);
        let gn1 = silu_backward3(&cache.n1, &ga1);
        let mut gx = self
            .norm1
            .backward(ps, &cache.x, &cache.stats1, &gn1, grads);
        match &self.skip {
            Some(conv) => gx += &conv.backward(ps, &cache.x, gy, grads),
            None => gx += gy,
        }
        gx
    }
}

// ---------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TinyUNet<T: Float> {
    pub cfg: UNetConfig,
    pub params: ParamSet<T>,
    fourier_freqs: Vec<f64>,
    stem: Conv2d,
    down_res: Vec<ResBlock>,
    down_conv: Vec<Conv2d>,
    mid1: ResBlock,
    attn: Option<SelfAttention>,
    mid2: ResBlock,
    up_conv: Vec<Conv2d>,
    up_res: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    temb1: Linear,
    temb2: Linear,
}

/// Intermediate activations of one forward pass.
pub struct UNetCache<T: Float> {
    input: Array3<T>,
    ff: Array1<T>,
    e1: Array1<T>,
    e1a: Array1<T>,
    e2: Array1<T>,
    emb_act: Array1<T>,
    down: Vec<(ResCache<T>, Array3<T>)>,
    mid1: ResCache<T>,
    attn: Option<AttnCache<T>>,
    mid2: ResCache<T>,
    up: Vec<(Array3<T>, ResCache<T>, usize)>,
    out_in: Array3<T>,
    out_stats: GnStats<T>,
    out_n: Array3<T>,
    out_a: Array3<T>,
}

impl<T: Float> TinyUNet<T> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_ch = cfg.data_channels + cfg.cond_channels;
        let levels = cfg.levels();
        let groups = cfg.norm_groups;

        // Log-spaced sinusoidal frequencies from 1 to 1000.
        let n_freq = cfg.emb_dim / 2;
        let fourier_freqs: Vec<f64> = (0..n_freq)
            .map(|k| 10f64.powf(3.0 * k as f64 / (n_freq.max(2) - 1) as f64))
            .collect();

        let temb1 = Linear::new(&mut ps, &mut rng, "temb.l1", cfg.emb_dim, cfg.emb_dim);
        let temb2 = Linear::new(&mut ps, &mut rng, "temb.l2", cfg.emb_dim, cfg.emb_dim);
        let stem = Conv2d::new(&mut ps, &mut rng, "stem", in_ch, cfg.channels[0], 3, 1, false);

        let mut down_res = Vec::new();
        let mut down_conv = Vec::new();
        for i in 0..levels {
            down_res.push(ResBlock::new(
                &mut ps,
                &mut rng,
                &format!("down{i}.res"),
                cfg.channels[i],
                cfg.channels[i],
                cfg.emb_dim,
                groups,
            ));
            down_conv.push(Conv2d::new(
                &mut ps,
                &mut rng,
                &format!("down{i}.conv"),
                cfg.channels[i],
                cfg.channels[i + 1],
                3,
                2,
                false,
            ));
        }
        let c_last = *cfg.channels.last().unwrap();
        let mid1 = ResBlock::new(&mut ps, &mut rng, "mid.res1", c_last, c_last, cfg.emb_dim, groups);
        let attn = if cfg.attention {
            Some(SelfAttention::new(&mut ps, &mut rng, "mid.attn", c_last, groups))
        } else {
            None
        };
        let mid2 = ResBlock::new(&mut ps, &mut rng, "mid.res2", c_last, c_last, cfg.emb_dim, groups);

        let mut up_conv = Vec::new();
        let mut up_res = Vec::new();
        for i in (0..levels).rev() {
            up_conv.push(Conv2d::new(
                &mut ps,
                &mut rng,
                &format!("up{i}.conv"),
                cfg.channels[i + 1],
                cfg.channels[i],
                3,
                1,
                false,
            ));
            up_res.push(ResBlock::new(
                &mut ps,
                &mut rng,
                &format!("up{i}.res"),
                2 * cfg.channels[i],
                cfg.channels[i],
                cfg.emb_dim,
                groups,
            ));
        }
        let out_norm = GroupNorm::new(&mut ps, "out.norm", cfg.channels[0], groups);
        let out_conv = Conv2d::new(
            &mut ps,
            &mut rng,
            "out.conv",
            cfg.channels[0],
            cfg.data_channels,
            3,
            1,
            true,
        );

        Ok(Self {
            cfg,
            params: ps,
            fourier_freqs,
            stem,
            down_res,
            down_conv,
            mid1,
            attn,
            mid2,
            up_conv,
            up_res,
            out_norm,
            out_conv,
            temb1,
            temb2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    /// Rebuild a network around checkpointed parameters. The layer graph is
    /// reconstructed from `cfg`; names and shapes must match exactly.
    pub fn load(cfg: UNetConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        if net.params.names != params.names {
            return Err(Error::Config(
                "checkpoint parameter names do not match the architecture".into(),
            ));
        }
        for (fresh, loaded) in net.params.tensors.iter().zip(&params.tensors) {
            if fresh.shape() != loaded.shape() {
                return Err(Error::Config(
                    "checkpoint parameter shapes do not match the architecture".into(),
                ));
            }
        }
        net.params = params;
        Ok(net)
    }

    fn fourier(&self, t: T) -> Array1<T> {
        let mut out = Array1::<T>::zeros(self.cfg.emb_dim);
        for (k, &f) in self.fourier_freqs.iter().enumerate() {
            let arg = t * real::<T>(f);
            out[2 * k] = arg.sin();
            out[2 * k + 1] = arg.cos();
        }
        out
    }

    /// Forward pass. `x` has `data_channels + cond_channels` planes;
    /// `noise_embed` is the scalar fed to the sinusoidal embedding.
    pub fn forward(&self, x: &Array3<T>, noise_embed: T) -> (Array3<T>, UNetCache<T>) {
        let ps = &self.params;
        let ff = self.fourier(noise_embed);
        let e1 = self.temb1.forward(ps, &ff);
        let e1a = e1.mapv(silu);
        let e2 = self.temb2.forward(ps, &e1a);
        let emb_act = e2.mapv(silu);

        let mut h = self.stem.forward(ps, x);
        let mut down = Vec::new();
        let mut skips = Vec::new();
        for i in 0..self.down_res.len() {
            let (res_out, res_cache) = self.down_res[i].forward(ps, &h, &emb_act);
            skips.push(res_out.clone());
            let next = self.down_conv[i].forward(ps, &res_out);
            down.push((res_cache, res_out));
            h = next;
        }
        let (m1, mid1_cache) = self.mid1.forward(ps, &h, &emb_act);
        let (m_attn, attn_cache) = match &self.attn {
            Some(attn) => {
                let (y, c) = attn.forward(ps, &m1);
                (y, Some(c))
            }
            None => (m1, None),
        };
        let (mut h, mid2_cache) = self.mid2.forward(ps, &m_attn, &emb_act);

        let mut up = Vec::new();
        for (j, i) in (0..self.down_res.len()).rev().enumerate() {
            let upsampled = upsample2(&h);
            let conv_out = self.up_conv[j].forward(ps, &upsampled);
            let skip = &skips[i];
            let cat = concatenate(Axis(0), &[conv_out.view(), skip.view()]).unwrap();
            let (res_out, res_cache) = self.up_res[j].forward(ps, &cat, &emb_act);
            up.push((upsampled, res_cache, conv_out.dim().0));
            h = res_out;
        }

        let (out_n, out_stats) = self.out_norm.forward(ps, &h);
        let out_a = silu_map(&out_n);
        let y = self.out_conv.forward(ps, &out_a);
        (
            y,
            UNetCache {
                input: x.clone(),
                ff,
                e1,
                e1a,
                e2,
                emb_act,
                down,
                mid1: mid1_cache,
                attn: attn_cache,
                mid2: mid2_cache,
                up,
                out_in: h,
                out_stats,
                out_n,
                out_a,
            },
        )
    }

    /// Parameter gradients for `d loss / d output = gy`. The input gradient
    /// is not needed by any caller and is dropped.
    pub fn backward(&self, cache: &UNetCache<T>, gy: &Array3<T>) -> GradSet<T> {
        let ps = &self.params;
        let mut grads = ps.zero_grads();
        let mut g_emb_act = Array1::<T>::zeros(self.cfg.emb_dim);

        let g_out_a = self.out_conv.backward(ps, &cache.out_a, gy, &mut grads);
        let g_out_n = silu_backward3(&cache.out_n, &g_out_a);
        let mut gh = self
            .out_norm
            .backward(ps, &cache.out_in, &cache.out_stats, &g_out_n, &mut grads);

        // Up path, reversed: up stage j handled level i = levels-1-j.
        let levels = self.down_res.len();
        let mut g_skips: Vec<Option<Array3<T>>> = vec![None; levels];
        for j in (0..levels).rev() {
            let i = levels - 1 - j;
            let (upsampled, res_cache, conv_ch) = &cache.up[j];
            let g_cat = self.up_res[j].backward_with_emb(
                ps,
                res_cache,
                &cache.emb_act,
                &gh,
                &mut grads,
                &mut g_emb_act,
            );
            let g_conv_out = g_cat.slice(ndarray::s![..*conv_ch, .., ..]).to_owned();
            let g_skip = g_cat.slice(ndarray::s![*conv_ch.., .., ..]).to_owned();
            g_skips[i] = Some(g_skip);
            let g_upsampled = self.up_conv[j].backward(ps, upsampled, &g_conv_out, &mut grads);
            gh = upsample2_backward(&g_upsampled);
        }

        gh = self.mid2.backward_with_emb(
            ps,
            &cache.mid2,
            &cache.emb_act,
            &gh,
            &mut grads,
            &mut g_emb_act,
        );
        if let (Some(attn), Some(attn_cache)) = (&self.attn, &cache.attn) {
            gh = attn.backward(ps, attn_cache, &gh, &mut grads);
        }
        gh = self.mid1.backward_with_emb(
            ps,
            &cache.mid1,
            &cache.emb_act,
            &gh,
            &mut grads,
            &mut g_emb_act,
        );

        // Down path, reversed.
        for i in (0..self.down_res.len()).rev() {
            let (res_cache, res_out) = &cache.down[i];
            let mut g_res_out = self.down_conv[i].backward(ps, res_out, &gh, &mut grads);
            if let Some(gs) = &g_skips[i] {
                g_res_out += gs;
            }
            gh = self.down_res[i].backward_with_emb(
                ps,
                res_cache,
                &cache.emb_act,
                &g_res_out,
                &mut grads,
                &mut g_emb_act,
            );
        }
        let _ = self.stem.backward(ps, &cache.input, &gh, &mut grads);

        // Embedding MLP.
        let mut g_e2 = g_emb_act;
        for (g, &v) in g_e2.iter_mut().zip(cache.e2.iter()) {
            *g *= silu_grad(v);
        }
        let g_e1a = self.temb2.backward(ps, &cache.e1a, &g_e2, &mut grads);
        let mut g_e1 = g_e1a;
        for (g, &v) in g_e1.iter_mut().zip(cache.e1.iter()) {
            *g *= silu_grad(v);
        }
        let _ = self.temb1.backward(ps, &cache.ff, &g_e1, &mut grads);

        grads
    }
}
