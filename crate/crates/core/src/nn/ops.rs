//! Layer primitives with explicit forward/backward passes.
//!
//! Feature maps are `Array3<T>` in (channel, row, col) layout. Backward
//! passes take the same inputs the forward saw plus the output gradient and
//! accumulate parameter gradients into a [`GradSet`].

use ndarray::{Array1, Array2, Array3, Ix1, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

use super::params::{normal_init, ones_init, zeros_init, GradSet, ParamId, ParamSet};
use crate::num::{real, Float};

// ---------------------------------------------------------------------
// Activation
// ---------------------------------------------------------------------

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu(x) / dx = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
#[inline]
pub fn silu_grad<T: Float>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_map<T: Float>(x: &Array3<T>) -> Array3<T> {
    x.mapv(silu)
}

/// Gradient through an elementwise SiLU whose input was `x`.
pub fn silu_backward3<T: Float>(x: &Array3<T>, gy: &Array3<T>) -> Array3<T> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| *g *= silu_grad(v));
    gx
}

// ---------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------

/// 2D convolution, kernel 1x1 or 3x3, stride 1 or 2, zero padding k/2.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel 1 or 3");
        assert!(stride == 1 || stride == 2, "stride 1 or 2");
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = if zero_init {
            ps.register(format!("{name}.w"), zeros_init(&[out_ch, in_ch, kernel, kernel]))
        } else {
            ps.register(
                format!("{name}.w"),
                normal_init(rng, &[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt()),
            )
        };
        let b = ps.register(format!("{name}.b"), zeros_init(&[out_ch]));
        Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn forward<T: Float>(&self, ps: &ParamSet<T>, x: &Array3<T>) -> Array3<T> {
        let (ci, h, w) = x.dim();
        debug_assert_eq!(ci, self.in_ch);
        let (oh, ow) = self.out_size(h, w);
        let weights = ps.get(self.w).view().into_dimensionality::<Ix4>().unwrap();
        let bias = ps.get(self.b).view().into_dimensionality::<Ix1>().unwrap();
        let pad = (self.kernel / 2) as isize;

        let mut out = Array3::<T>::zeros((self.out_ch, oh, ow));
        for co in 0..self.out_ch {
            let bco = bias[co];
            out.index_axis_mut(ndarray::Axis(0), co).fill(bco);
        }
        for co in 0..self.out_ch {
            for cin in 0..self.in_ch {
                let xin = x.index_axis(ndarray::Axis(0), cin);
                let xin_slice = xin.to_slice().expect("contiguous input channel");
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wv = weights[[co, cin, ky, kx]];
                        if wv == T::zero() {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        if self.stride == 1 {
                            // out[oy][ox] += wv * x[oy+dy][ox+dx] over the
                            // valid window, as one shifted AXPY per row.
                            let oy0 = (-dy).max(0) as usize;
                            let oy1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                            if ox0 >= ox1 {
                                continue;
                            }
                            let ix0 = (ox0 as isize + dx) as usize;
                            let ix1 = ix0 + (ox1 - ox0);
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let src = &xin_slice[iy * w + ix0..iy * w + ix1];
                                let mut orow = out.slice_mut(ndarray::s![co, oy, ox0..ox1]);
                                let orow = orow.as_slice_mut().expect("contiguous out row");
                                for (o, &s) in orow.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = oy as isize * 2 + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let iy = iy as usize;
                                for ox in 0..ow {
                                    let ix = ox as isize * 2 + dx;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out[[co, oy, ox]] += wv * xin_slice[iy * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the input gradient and accumulates weight/bias gradients.
    pub fn backward<T: Float>(
        &self,
        ps: &ParamSet<T>,
        x: &Array3<T>,
        gy: &Array3<T>,
        grads: &mut GradSet<T>,
    ) -> Array3<T> {
        let (_, h, w) = x.dim();
        let (_, oh, ow) = gy.dim();
        let weights = ps.get(self.w).view().into_dimensionality::<Ix4>().unwrap();
        let pad = (self.kernel / 2) as isize;

        let mut gx = Array3::<T>::zeros(x.raw_dim());
        {
            let gb = grads.get_mut(self.b);
            for co in 0..self.out_ch {
                let mut acc = T::zero();
                for v in gy.index_axis(ndarray::Axis(0), co).iter() {
                    acc += *v;
                }
                gb[co] += acc;
            }
        }

        // Weight gradients: gw[co,ci,ky,kx] = sum gy[co,oy,ox] * x[ci,iy,ix].
        {
            let gw = grads.get_mut(self.w);
            let mut gw4 = gw.view_mut().into_dimensionality::<Ix4>().unwrap();
            for co in 0..self.out_ch {
                let gyc = gy.index_axis(ndarray::Axis(0), co);
                let gyc_slice = gyc.to_slice().expect("contiguous gy channel");
                for cin in 0..self.in_ch {
                    let xin = x.index_axis(ndarray::Axis(0), cin);
                    let xin_slice = xin.to_slice().expect("contiguous x channel");
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            let mut acc = T::zero();
                            if self.stride == 1 {
                                let oy0 = (-dy).max(0) as usize;
                                let oy1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                                let ox0 = (-dx).max(0) as usize;
                                let ox1 = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                                if ox0 < ox1 {
                                    let ix0 = (ox0 as isize + dx) as usize;
                                    let ix1 = ix0 + (ox1 - ox0);
                                    for oy in oy0..oy1 {
                                        let iy = (oy as isize + dy) as usize;
                                        let grow = &gyc_slice[oy * ow + ox0..oy * ow + ox1];
                                        let xrow = &xin_slice[iy * w + ix0..iy * w + ix1];
                                        for (g, &xv) in grow.iter().zip(xrow) {
                                            acc += *g * xv;
                                        }
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = oy as isize * 2 + dy;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = ox as isize * 2 + dx;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += gyc_slice[oy * ow + ox]
                                            * xin_slice[iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            gw4[[co, cin, ky, kx]] += acc;
                        }
                    }
                }
            }
        }

        // Input gradients: gx[ci,iy,ix] += w[co,ci,ky,kx] * gy[co,oy,ox].
        for co in 0..self.out_ch {
            let gyc = gy.index_axis(ndarray::Axis(0), co);
            let gyc_slice = gyc.to_slice().expect("contiguous gy channel");
            for cin in 0..self.in_ch {
                let mut gxc = gx.index_axis_mut(ndarray::Axis(0), cin);
                let gxc_slice = gxc.as_slice_mut().expect("contiguous gx channel");
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wv = weights[[co, cin, ky, kx]];
                        if wv == T::zero() {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        if self.stride == 1 {
                            let oy0 = (-dy).max(0) as usize;
                            let oy1 = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                            if ox0 >= ox1 {
                                continue;
                            }
                            let ix0 = (ox0 as isize + dx) as usize;
                            let ix1 = ix0 + (ox1 - ox0);
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let grow = &gyc_slice[oy * ow + ox0..oy * ow + ox1];
                                let dst = &mut gxc_slice[iy * w + ix0..iy * w + ix1];
                                for (d, &g) in dst.iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = oy as isize * 2 + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = ox as isize * 2 + dx;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    gxc_slice[iy as usize * w + ix as usize] +=
                                        wv * gyc_slice[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            normal_init(rng, &[out_dim, in_dim], (1.0 / in_dim as f64).sqrt()),
        );
        let b = ps.register(format!("{name}.b"), zeros_init(&[out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Float>(&self, ps: &ParamSet<T>, x: &Array1<T>) -> Array1<T> {
        let w = ps.get(self.w).view().into_dimensionality::<Ix2>().unwrap();
        let b = ps.get(self.b).view().into_dimensionality::<Ix1>().unwrap();
        let mut y = w.dot(x);
        y += &b;
        y
    }

    pub fn backward<T: Float>(
        &self,
        ps: &ParamSet<T>,
        x: &Array1<T>,
        gy: &Array1<T>,
        grads: &mut GradSet<T>,
    ) -> Array1<T> {
        let w = ps.get(self.w).view().into_dimensionality::<Ix2>().unwrap();
        {
            let gw = grads.get_mut(self.w);
            let mut gw2 = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
            for o in 0..self.out_dim {
                for i in 0..self.in_dim {
                    gw2[[o, i]] += gy[o] * x[i];
                }
            }
        }
        {
            let gb = grads.get_mut(self.b);
            for o in 0..self.out_dim {
                gb[o] += gy[o];
            }
        }
        w.t().dot(gy)
    }
}

// ---------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

/// Per-group statistics captured in the forward pass.
#[derive(Debug, Clone)]
pub struct GnStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert!(channels.is_multiple_of(groups), "channels divisible by groups");
        let gamma = ps.register(format!("{name}.gamma"), ones_init(&[channels]));
        let beta = ps.register(format!("{name}.beta"), zeros_init(&[channels]));
        Self {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Float>(&self, ps: &ParamSet<T>, x: &Array3<T>) -> (Array3<T>, GnStats<T>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let n = real::<T>((cg * h * w) as f64);
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let eps = real::<T>(self.eps);

        let mut mean = vec![T::zero(); self.groups];
        let mut rstd = vec![T::zero(); self.groups];
        let mut y = Array3::<T>::zeros(x.raw_dim());
        for g in 0..self.groups {
            let mut sum = T::zero();
            let mut sq = T::zero();
            for ch in g * cg..(g + 1) * cg {
                for v in x.index_axis(ndarray::Axis(0), ch).iter() {
                    sum += *v;
                    sq += *v * *v;
                }
            }
            let mu = sum / n;
            let var = sq / n - mu * mu;
            let rs = T::one() / (var + eps).sqrt();
            mean[g] = mu;
            rstd[g] = rs;
            for ch in g * cg..(g + 1) * cg {
                let ga = gamma[ch];
                let be = beta[ch];
                let xin = x.index_axis(ndarray::Axis(0), ch);
                let mut yo = y.index_axis_mut(ndarray::Axis(0), ch);
                yo.zip_mut_with(&xin, |o, &v| *o = (v - mu) * rs * ga + be);
            }
        }
        (y, GnStats { mean, rstd })
    }

    pub fn backward<T: Float>(
        &self,
        ps: &ParamSet<T>,
        x: &Array3<T>,
        stats: &GnStats<T>,
        gy: &Array3<T>,
        grads: &mut GradSet<T>,
    ) -> Array3<T> {
        let (c, h, w) = x.dim();
        let cg = c / self.groups;
        let n = real::<T>((cg * h * w) as f64);
        let gamma = ps.get(self.gamma).clone();

        let mut gx = Array3::<T>::zeros(x.raw_dim());
        for g in 0..self.groups {
            let mu = stats.mean[g];
            let rs = stats.rstd[g];
            // First pass: per-group reductions of ghat and ghat*xhat where
            // ghat = gy*gamma and xhat = (x-mu)*rstd.
            let mut sum_ghat = T::zero();
            let mut sum_ghat_xhat = T::zero();
            for ch in g * cg..(g + 1) * cg {
                let ga = gamma[ch];
                let xin = x.index_axis(ndarray::Axis(0), ch);
                let gyc = gy.index_axis(ndarray::Axis(0), ch);
                for (&xv, &gv) in xin.iter().zip(gyc.iter()) {
                    let xhat = (xv - mu) * rs;
                    let ghat = gv * ga;
                    sum_ghat += ghat;
                    sum_ghat_xhat += ghat * xhat;
                }
            }
            let mean_ghat = sum_ghat / n;
            let mean_ghat_xhat = sum_ghat_xhat / n;
            for ch in g * cg..(g + 1) * cg {
                let ga = gamma[ch];
                let xin = x.index_axis(ndarray::Axis(0), ch);
                let gyc = gy.index_axis(ndarray::Axis(0), ch);
                let mut gparam_gamma = T::zero();
                let mut gparam_beta = T::zero();
                let mut gxc = gx.index_axis_mut(ndarray::Axis(0), ch);
                ndarray::Zip::from(&mut gxc)
                    .and(&xin)
                    .and(&gyc)
                    .for_each(|go, &xv, &gv| {
                        let xhat = (xv - mu) * rs;
                        let ghat = gv * ga;
                        gparam_gamma += gv * xhat;
                        gparam_beta += gv;
                        *go = rs * (ghat - mean_ghat - xhat * mean_ghat_xhat);
                    });
                let ggamma = grads.get_mut(self.gamma);
                ggamma[ch] += gparam_gamma;
                let gbeta = grads.get_mut(self.beta);
                gbeta[ch] += gparam_beta;
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------

/// Nearest-neighbor 2x upsample.
pub fn upsample2<T: Float>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<T>::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[[ch, i, j]];
                y[[ch, 2 * i, 2 * j]] = v;
                y[[ch, 2 * i + 1, 2 * j]] = v;
                y[[ch, 2 * i, 2 * j + 1]] = v;
                y[[ch, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Float>(gy: &Array3<T>) -> Array3<T> {
    let (c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::<T>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                gx[[ch, i, j]] = gy[[ch, 2 * i, 2 * j]]
                    + gy[[ch, 2 * i + 1, 2 * j]]
                    + gy[[ch, 2 * i, 2 * j + 1]]
                    + gy[[ch, 2 * i + 1, 2 * j + 1]];
            }
        }
    }
    gx
}

/// 2x2 average pooling.
pub fn avgpool2<T: Float>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = real::<T>(0.25);
    let mut y = Array3::<T>::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                y[[ch, i, j]] = (x[[ch, 2 * i, 2 * j]]
                    + x[[ch, 2 * i + 1, 2 * j]]
                    + x[[ch, 2 * i, 2 * j + 1]]
                    + x[[ch, 2 * i + 1, 2 * j + 1]])
                    * quarter;
            }
        }
    }
    y
}

pub fn avgpool2_backward<T: Float>(gy: &Array3<T>) -> Array3<T> {
    let (c, oh, ow) = gy.dim();
    let quarter = real::<T>(0.25);
    let mut gx = Array3::<T>::zeros((c, oh * 2, ow * 2));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let v = gy[[ch, i, j]] * quarter;
                gx[[ch, 2 * i, 2 * j]] = v;
                gx[[ch, 2 * i + 1, 2 * j]] = v;
                gx[[ch, 2 * i, 2 * j + 1]] = v;
                gx[[ch, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------
// Single-head self attention over spatial tokens
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T: Float> {
    pub x: Array3<T>,
    pub normed: Array3<T>,
    pub stats: GnStats<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub attn: Array2<T>,
    pub proj_in: Array3<T>,
}

impl SelfAttention {
    pub fn new<T: Float>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        let norm = GroupNorm::new(ps, &format!("{name}.norm"), channels, groups);
        let qkv = Conv2d::new(ps, rng, &format!("{name}.qkv"), channels, 3 * channels, 1, 1, false);
        let proj = Conv2d::new(ps, rng, &format!("{name}.proj"), channels, channels, 1, 1, true);
        Self {
            norm,
            qkv,
            proj,
            channels,
        }
    }

    fn to_tokens<T: Float>(map: &Array3<T>, ch_off: usize, c: usize) -> Array2<T> {
        let (_, h, w) = map.dim();
        let n = h * w;
        let mut out = Array2::<T>::zeros((n, c));
        for ch in 0..c {
            let plane = map.index_axis(ndarray::Axis(0), ch_off + ch);
            let plane = plane.to_slice().unwrap();
            for t in 0..n {
                out[[t, ch]] = plane[t];
            }
        }
        out
    }

    fn from_tokens<T: Float>(tokens: &Array2<T>, h: usize, w: usize) -> Array3<T> {
        let (n, c) = tokens.dim();
        debug_assert_eq!(n, h * w);
        let mut out = Array3::<T>::zeros((c, h, w));
        for ch in 0..c {
            let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
            let plane = plane.as_slice_mut().unwrap();
            for t in 0..n {
                plane[t] = tokens[[t, ch]];
            }
        }
        out
    }

    pub fn forward<T: Float>(&self, ps: &ParamSet<T>, x: &Array3<T>) -> (Array3<T>, AttnCache<T>) {
        let (c, h, w) = x.dim();
        let (normed, stats) = self.norm.forward(ps, x);
        let qkv_map = self.qkv.forward(ps, &normed);
        let q = Self::to_tokens(&qkv_map, 0, c);
        let k = Self::to_tokens(&qkv_map, c, c);
        let v = Self::to_tokens(&qkv_map, 2 * c, c);
        let scale = real::<T>(1.0 / (c as f64).sqrt());
        let mut scores = q.dot(&k.t());
        scores.mapv_inplace(|s| s * scale);
        // Row softmax.
        for mut row in scores.rows_mut() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        let o = scores.dot(&v);
        let proj_in = Self::from_tokens(&o, h, w);
        let mut y = self.proj.forward(ps, &proj_in);
        y += x;
        (
            y,
            AttnCache {
                x: x.clone(),
                normed,
                stats,
                q,
                k,
                v,
                attn: scores,
                proj_in,
            },
        )
    }

    pub fn backward<T: Float>(
        &self,
        ps: &ParamSet<T>,
        cache: &AttnCache<T>,
        gy: &Array3<T>,
        grads: &mut GradSet<T>,
    ) -> Array3<T> {
        let (c, h, w) = cache.x.dim();
        let scale = real::<T>(1.0 / (c as f64).sqrt());
        let g_proj_in = self.proj.backward(ps, &cache.proj_in, gy, grads);
        let go = Self::to_tokens(&g_proj_in, 0, c);

        let g_attn = go.dot(&cache.v.t());
        let gv = cache.attn.t().dot(&go);
        // Softmax backward row by row.
        let mut gs = Array2::<T>::zeros(cache.attn.raw_dim());
        for (i, row) in cache.attn.rows().into_iter().enumerate() {
            let mut dot = T::zero();
            for (j, &a) in row.iter().enumerate() {
                dot += g_attn[[i, j]] * a;
            }
            for (j, &a) in row.iter().enumerate() {
                gs[[i, j]] = a * (g_attn[[i, j]] - dot);
            }
        }
        gs.mapv_inplace(|v| v * scale);
        let gq = gs.dot(&cache.k);
        let gk = gs.t().dot(&cache.q);

        let mut g_qkv_map = Array3::<T>::zeros((3 * c, h, w));
        for (off, gmat) in [(0, &gq), (c, &gk), (2 * c, &gv)] {
            for ch in 0..c {
                let mut plane = g_qkv_map.index_axis_mut(ndarray::Axis(0), off + ch);
                let plane = plane.as_slice_mut().unwrap();
                for t in 0..h * w {
                    plane[t] = gmat[[t, ch]];
                }
            }
        }
        let g_normed = self.qkv.backward(ps, &cache.normed, &g_qkv_map, grads);
        let mut gx = self
            .norm
            .backward(ps, &cache.x, &cache.stats, &g_normed, grads);
        gx += gy;
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut x = Array3::<f64>::zeros((c, h, w));
        for v in x.iter_mut() {
            *v = f64::standard_normal(rng);
        }
        x
    }

    /// Central-difference check of input gradients for a scalar loss
    /// L = sum(y * m) with a fixed random mask m.
    fn check_input_grad<F, B>(
        name: &str,
        x: &Array3<f64>,
        forward: F,
        backward: B,
        tol: f64,
    ) where
        F: Fn(&Array3<f64>) -> Array3<f64>,
        B: Fn(&Array3<f64>, &Array3<f64>) -> Array3<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = forward(x);
        let mask = {
            let mut m = Array3::<f64>::zeros(y.raw_dim());
            for v in m.iter_mut() {
                *v = f64::standard_normal(&mut rng);
            }
            m
        };
        let gx = backward(x, &mask);
        let h = 1e-5;
        let mut probe = x.clone();
        let mut checked = 0;
        for idx in [(0usize, 0usize, 0usize), (0, 1, 2), (0, 2, 1)] {
            if idx.1 >= x.dim().1 || idx.2 >= x.dim().2 {
                continue;
            }
            probe[idx] = x[idx] + h;
            let lp: f64 = (forward(&probe) * &mask).sum();
            probe[idx] = x[idx] - h;
            let lm: f64 = (forward(&probe) * &mask).sum();
            probe[idx] = x[idx];
            let fd = (lp - lm) / (2.0 * h);
            let rel = (gx[idx] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < tol, "{name} idx {idx:?}: analytic {} fd {fd}", gx[idx]);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::<f64>::new();
        let conv = Conv2d::new(&mut ps, &mut rng, "c", 2, 3, 3, 1, false);
        let x = rand_map(&mut rng, 2, 5, 4);
        let y = conv.forward(&ps, &x);
        assert_eq!(y.dim(), (3, 5, 4));
        // Direct evaluation at a few positions.
        let w = ps.get(conv.w).view().into_dimensionality::<Ix4>().unwrap();
        let b = ps.get(conv.b);
        for &(co, oy, ox) in &[(0usize, 0usize, 0usize), (1, 2, 2), (2, 4, 3)] {
            let mut acc = b[co];
            for ci in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < 5 && (ix as usize) < 4 {
                            acc += w[[co, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            assert!((y[[co, oy, ox]] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_stride2_shapes_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::<f64>::new();
        let conv = Conv2d::new(&mut ps, &mut rng, "c", 2, 4, 3, 2, false);
        let x = rand_map(&mut rng, 2, 8, 8);
        let y = conv.forward(&ps, &x);
        assert_eq!(y.dim(), (4, 4, 4));
        let ps_ref = &ps;
        check_input_grad(
            "conv_s2",
            &x,
            |x| conv.forward(ps_ref, x),
            |x, m| {
                let mut g = ps_ref.zero_grads();
                conv.backward(ps_ref, x, m, &mut g)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_weight_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        let conv = Conv2d::new(&mut ps, &mut rng, "c", 2, 2, 3, 1, false);
        let x = rand_map(&mut rng, 2, 6, 6);
        let mask = rand_map(&mut rng, 2, 6, 6);
        let mut grads = ps.zero_grads();
        conv.backward(&ps, &x, &mask, &mut grads);

        let h = 1e-6;
        for &flat in &[0usize, 7, 20, 35] {
            let mut ps2 = ps.clone();
            {
                let w = ps2.get_mut(conv.w);
                w.as_slice_mut().unwrap()[flat] += h;
            }
            let lp: f64 = (conv.forward(&ps2, &x) * &mask).sum();
            {
                let w = ps2.get_mut(conv.w);
                w.as_slice_mut().unwrap()[flat] -= 2.0 * h;
            }
            let lm: f64 = (conv.forward(&ps2, &x) * &mask).sum();
            let fd = (lp - lm) / (2.0 * h);
            let analytic = grads.tensors[conv.w.0].as_slice().unwrap()[flat];
            assert!(
                (analytic - fd).abs() / fd.abs().max(1e-6) < 1e-5,
                "w[{flat}]: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn groupnorm_normalizes_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::<f64>::new();
        let gn = GroupNorm::new(&mut ps, "gn", 4, 2);
        let x = rand_map(&mut rng, 4, 5, 5);
        let (y, _) = gn.forward(&ps, &x);
        // Unit gamma, zero beta: each group has ~zero mean, ~unit variance.
        for g in 0..2 {
            let mut vals = Vec::new();
            for ch in g * 2..(g + 1) * 2 {
                vals.extend(y.index_axis(ndarray::Axis(0), ch).iter().copied());
            }
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let ps_ref = &ps;
        check_input_grad(
            "groupnorm",
            &x,
            |x| gn.forward(ps_ref, x).0,
            |x, m| {
                let mut g = ps_ref.zero_grads();
                let (_, stats) = gn.forward(ps_ref, x);
                gn.backward(ps_ref, x, &stats, m, &mut g)
            },
            1e-5,
        );
    }

    #[test]
    fn silu_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_map(&mut rng, 1, 3, 3);
        check_input_grad(
            "silu",
            &x,
            silu_map,
            silu_backward3,
            1e-6,
        );
    }

    #[test]
    fn upsample_and_pool_are_adjoint_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_map(&mut rng, 2, 4, 4);
        let up = upsample2(&x);
        assert_eq!(up.dim(), (2, 8, 8));
        assert_eq!(up[[1, 5, 3]], x[[1, 2, 1]]);
        let gy = rand_map(&mut rng, 2, 8, 8);
        let gx = upsample2_backward(&gy);
        // Sum preserved under the adjoint.
        assert!((gx.sum() - gy.sum()).abs() < 1e-9);

        let pooled = avgpool2(&up);
        assert_eq!(pooled.dim(), (2, 4, 4));
        for idx in [(0usize, 0usize, 0usize), (1, 2, 3)] {
            assert!((pooled[idx] - x[idx]).abs() < 1e-12);
        }
        let gp = avgpool2_backward(&gy.slice(ndarray::s![.., ..4, ..4]).to_owned());
        assert_eq!(gp.dim(), (2, 8, 8));
    }

    #[test]
    fn attention_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::<f64>::new();
        let attn = SelfAttention::new(&mut ps, &mut rng, "attn", 4, 2);
        // Perturb proj weights away from zero init so gradients flow.
        {
            let w = ps.get_mut(attn.proj.w);
            for v in w.iter_mut() {
                *v = f64::standard_normal(&mut rng) * 0.2;
            }
        }
        let x = rand_map(&mut rng, 4, 4, 4);
        let ps_ref = &ps;
        check_input_grad(
            "attention",
            &x,
            |x| attn.forward(ps_ref, x).0,
            |x, m| {
                let mut g = ps_ref.zero_grads();
                let (_, cache) = attn.forward(ps_ref, x);
                attn.backward(ps_ref, &cache, m, &mut g)
            },
            1e-5,
        );
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::new(&mut ps, &mut rng, "l", 5, 3);
        let x = Array1::from_shape_fn(5, |_| f64::standard_normal(&mut rng));
        let gy = Array1::from_shape_fn(3, |_| f64::standard_normal(&mut rng));
        let mut grads = ps.zero_grads();
        let gx = lin.backward(&ps, &x, &gy, &mut grads);

        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let lp: f64 = lin.forward(&ps, &xp).dot(&gy);
            xp[i] -= 2.0 * h;
            let lm: f64 = lin.forward(&ps, &xp).dot(&gy);
            let fd = (lp - lm) / (2.0 * h);
            assert!((gx[i] - fd).abs() < 1e-6);
        }
    }
}
