//! Layers with explicit forward and backward passes.
//!
//! Forward passes take `&self`; training forwards additionally return a cache
//! that the matching backward consumes. Parameter gradients accumulate into
//! [`Param::grad`].

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_ld, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution (or transposed convolution) kernel; the only kind L2 touches.
    Kernel,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, kind: ParamKind, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param {
            name,
            kind,
            shape,
            value,
            grad: vec![T::zero(); n],
        }
    }

    fn filled(name: String, kind: ParamKind, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Param::new(name, kind, shape, vec![v; n])
    }

    fn normal<R: Rng>(name: String, shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        Param::new(name, ParamKind::Kernel, shape, value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Non-trainable state (normalization running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `kt`.
fn tap_range(d: usize, o: usize, kt: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kt).div_ceil(s);
    let hi = if d + p > kt { ((d + p - kt - 1) / s + 1).min(o) } else { 0 };
    (lo.min(hi), hi)
}

/// Zeroes positions outside `[z_lo, z_hi)` of every `line`-long row in `span`.
///
/// Strided writes: the edges are usually one element wide, where per-row
/// `fill` calls cost more than the copy itself.
fn clear_z_edges<T: Real>(span: &mut [T], line: usize, z_lo: usize, z_hi: usize) {
    for e in (0..z_lo).chain(z_hi..line) {
        for v in span[e..].iter_mut().step_by(line) {
            *v = T::zero();
        }
    }
}

/// Copies kernel windows into columns: row `(ci, kx, ky, kz)`, column = output
/// voxel of the x-slab `xs`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    d: [usize; 3],
    k: usize,
    s: usize,
    p: usize,
    o: [usize; 3],
    xs: Range<usize>,
    col: &mut [T],
) {
    let vin = d[0] * d[1] * d[2];
    let plane = o[1] * o[2];
    let vout = xs.len() * plane;
    let zero = T::zero();
    for ci in 0..channels {
        let xc = &x[ci * vin..(ci + 1) * vin];
        for kx in 0..k {
            let (x_lo, x_hi) = tap_range(d[0], o[0], kx, s, p);
            let (x_lo, x_hi) = (x_lo.clamp(xs.start, xs.end) - xs.start, x_hi.clamp(xs.start, xs.end) - xs.start);
            for ky in 0..k {
                let (y_lo, y_hi) = tap_range(d[1], o[1], ky, s, p);
                for kz in 0..k {
                    let (z_lo, z_hi) = tap_range(d[2], o[2], kz, s, p);
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let dst = &mut col[row * vout..(row + 1) * vout];
                    if x_lo >= x_hi || y_lo >= y_hi || z_lo >= z_hi {
                        dst.fill(zero);
                        continue;
                    }
                    dst[..x_lo * plane].fill(zero);
                    dst[x_hi * plane..].fill(zero);
                    for ox in x_lo..x_hi {
                        let ix = (ox + xs.start) * s + kx - p;
                        let block = &mut dst[ox * plane..(ox + 1) * plane];
                        block[..y_lo * o[2]].fill(zero);
                        block[y_hi * o[2]..].fill(zero);
                        if s == 1 && o == d {
                            // Rows are contiguous in both grids (o == d); copy the
                            // whole y-span shifted by the z tap, then clear the
                            // wrapped z edges.
                            let span = &mut block[y_lo * o[2]..y_hi * o[2]];
                            let src0 = (ix * d[1] + y_lo + ky - p) * d[2];
                            let shift = kz as isize - p as isize;
                            let a = (src0 as isize + shift).max((ix * d[1] * d[2]) as isize) as usize;
                            let b = ((src0 + span.len()) as isize + shift).min(vin as isize) as usize;
                            let off = (a as isize - src0 as isize - shift) as usize;
                            span[..off].fill(zero);
                            span[off..off + (b - a)].copy_from_slice(&xc[a..b]);
                            span[off + (b - a)..].fill(zero);
                            clear_z_edges(span, o[2], z_lo, z_hi);
                        } else {
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - p;
                                let base = (ix * d[1] + iy) * d[2];
                                let line = &mut block[oy * o[2]..(oy + 1) * o[2]];
                                line[..z_lo].fill(zero);
                                line[z_hi..].fill(zero);
                                for (oz, v) in line[z_lo..z_hi].iter_mut().enumerate() {
                                    *v = xc[base + (oz + z_lo) * s + kz - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
///
/// Clobbers the padding entries of `col`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &mut [T],
    channels: usize,
    d: [usize; 3],
    k: usize,
    s: usize,
    p: usize,
    o: [usize; 3],
    xs: Range<usize>,
    dx: &mut [T],
) {
    let vin = d[0] * d[1] * d[2];
    let plane = o[1] * o[2];
    let vout = xs.len() * plane;
    for ci in 0..channels {
        let xc = &mut dx[ci * vin..(ci + 1) * vin];
        for kx in 0..k {
            let (x_lo, x_hi) = tap_range(d[0], o[0], kx, s, p);
            let (x_lo, x_hi) = (x_lo.clamp(xs.start, xs.end) - xs.start, x_hi.clamp(xs.start, xs.end) - xs.start);
            for ky in 0..k {
                let (y_lo, y_hi) = tap_range(d[1], o[1], ky, s, p);
                for kz in 0..k {
                    let (z_lo, z_hi) = tap_range(d[2], o[2], kz, s, p);
                    if x_lo >= x_hi || y_lo >= y_hi || z_lo >= z_hi {
                        continue;
                    }
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let src = &mut col[row * vout..(row + 1) * vout];
                    for ox in x_lo..x_hi {
                        let ix = (ox + xs.start) * s + kx - p;
                        let block = &mut src[ox * plane..(ox + 1) * plane];
                        if s == 1 && o == d {
                            // Zero the padding taps so the shifted span adds nothing
                            // across row boundaries.
                            let span = &mut block[y_lo * o[2]..y_hi * o[2]];
                            clear_z_edges(span, o[2], z_lo, z_hi);
                            let src0 = (ix * d[1] + y_lo + ky - p) * d[2];
                            let shift = kz as isize - p as isize;
                            let a = (src0 as isize + shift).max((ix * d[1] * d[2]) as isize) as usize;
                            let b = ((src0 + span.len()) as isize + shift).min(vin as isize) as usize;
                            let off = (a as isize - src0 as isize - shift) as usize;
                            for (t, &g) in xc[a..b].iter_mut().zip(&span[off..off + (b - a)]) {
                                *t += g;
                            }
                        } else {
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - p;
                                let base = (ix * d[1] + iy) * d[2];
                                let line = &block[oy * o[2]..(oy + 1) * o[2]];
                                for oz in z_lo..z_hi {
                                    xc[base + oz * s + kz - p] += line[oz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3D convolution with cubic kernel, uniform stride and zero padding.
#[derive(Clone, Debug)]
pub struct Conv3d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * k * k * k) as f64;
        Conv3d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::normal(
                format!("{name}.weight"),
                vec![out_c, in_c, k, k, k],
                (gain / fan_in).sqrt(),
                rng,
            ),
            bias: Param::filled(format!("{name}.bias"), ParamKind::Bias, vec![out_c], T::zero()),
        }
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        d.map(|n| (n + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output x-planes per im2col slab, sized so a slab stays cache resident.
    fn slab_planes(&self, o: [usize; 3]) -> usize {
        const SLAB_ELEMS: usize = 1 << 18;
        let per_plane = self.in_c * self.k.pow(3) * o[1] * o[2];
        (SLAB_ELEMS / per_plane.max(1)).clamp(1, o[0].max(1))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_c, "{} input channels", self.weight.name);
        let d = x.spatial();
        let o = self.out_dims(d);
        let vout = o[0] * o[1] * o[2];
        let plane = o[1] * o[2];
        let kk = self.in_c * self.k.pow(3);
        let mut y = Tensor::zeros([x.batch(), self.out_c, o[0], o[1], o[2]]);
        if self.is_pointwise() {
            for n in 0..x.batch() {
                let yn = y.sample_mut(n);
                for (co, chunk) in yn.chunks_mut(vout).enumerate() {
                    chunk.fill(self.bias.value[co]);
                }
                matmul(self.out_c, kk, vout, &self.weight.value, false, x.sample(n), false, yn, T::one());
            }
            return y;
        }
        let planes = self.slab_planes(o);
        T::with_scratch(kk * planes * plane, 0, |col, _| {
            for n in 0..x.batch() {
                let yn = y.sample_mut(n);
                for (co, chunk) in yn.chunks_mut(vout).enumerate() {
                    chunk.fill(self.bias.value[co]);
                }
                for x0 in (0..o[0]).step_by(planes) {
                    let xs = x0..(x0 + planes).min(o[0]);
                    let sv = xs.len() * plane;
                    im2col(x.sample(n), self.in_c, d, self.k, self.stride, self.pad, o, xs, col);
                    let c = &mut yn[x0 * plane..];
                    matmul_ld(self.out_c, kk, sv, &self.weight.value, false, kk, col, false, sv, c, vout, T::one());
                }
            }
        });
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when requested.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let d = x.spatial();
        let o = self.out_dims(d);
        assert_eq!(dy.spatial(), o);
        let vout = o[0] * o[1] * o[2];
        let plane = o[1] * o[2];
        let kk = self.in_c * self.k.pow(3);
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        for n in 0..x.batch() {
            for (co, chunk) in dy.sample(n).chunks(vout).enumerate() {
                let s: T = chunk.iter().copied().sum();
                self.bias.grad[co] += s;
            }
        }
        if self.is_pointwise() {
            for n in 0..x.batch() {
                let dyn_ = dy.sample(n);
                // dW (out × K) += dY (out × V) · xᵀ (V × K)
                matmul(self.out_c, vout, kk, dyn_, false, x.sample(n), true, &mut self.weight.grad, T::one());
                if let Some(dx) = dx.as_mut() {
                    matmul(kk, self.out_c, vout, &self.weight.value, true, dyn_, false, dx.sample_mut(n), T::zero());
                }
            }
            return dx;
        }
        let planes = self.slab_planes(o);
        let slab_len = kk * planes * plane;
        let (weight, out_c) = (&mut self.weight, self.out_c);
        let (in_c, k, stride, pad) = (self.in_c, self.k, self.stride, self.pad);
        T::with_scratch(slab_len, if need_dx { slab_len } else { 0 }, |col, dcol| {
            for n in 0..x.batch() {
                let dyn_ = dy.sample(n);
                for x0 in (0..o[0]).step_by(planes) {
                    let xs = x0..(x0 + planes).min(o[0]);
                    let sv = xs.len() * plane;
                    let dy_slab = &dyn_[x0 * plane..];
                    im2col(x.sample(n), in_c, d, k, stride, pad, o, xs.clone(), col);
                    // dW (out × K) += dY (out × V) · colᵀ (V × K)
                    matmul_ld(out_c, sv, kk, dy_slab, false, vout, col, true, sv, &mut weight.grad, kk, T::one());
                    if let Some(dx) = dx.as_mut() {
                        // dcol (K × V) = Wᵀ (K × out) · dY (out × V)
                        matmul_ld(kk, out_c, sv, &weight.value, true, kk, dy_slab, false, vout, dcol, sv, T::zero());
                        col2im(dcol, in_c, d, k, stride, pad, o, xs, dx.sample_mut(n));
                    }
                }
            }
        });
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact ×2 upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d<T> {
    pub in_c: usize,
    pub out_c: usize,
    /// Stored `in_c × out_c × 2 × 2 × 2`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ConvTranspose3d<T> {
    pub fn new<R: Rng>(name: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        ConvTranspose3d {
            in_c,
            out_c,
            weight: Param::normal(
                format!("{name}.weight"),
                vec![in_c, out_c, 2, 2, 2],
                (2.0 / in_c as f64).sqrt(),
                rng,
            ),
            bias: Param::filled(format!("{name}.bias"), ParamKind::Bias, vec![out_c], T::zero()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_c, "{} input channels", self.weight.name);
        let [xd, yd, zd] = x.spatial();
        let vin = xd * yd * zd;
        let rows = self.out_c * 8;
        let mut z = vec![T::zero(); rows * vin];
        let mut y = Tensor::zeros([x.batch(), self.out_c, 2 * xd, 2 * yd, 2 * zd]);
        let (oy, oz) = (2 * yd, 2 * zd);
        for n in 0..x.batch() {
            // Z (out·8 × V) = Wᵀ · X
            matmul(rows, self.in_c, vin, &self.weight.value, true, x.sample(n), false, &mut z, T::zero());
            let yn = y.sample_mut(n);
            for co in 0..self.out_c {
                let b = self.bias.value[co];
                let out = &mut yn[co * 8 * vin..(co + 1) * 8 * vin];
                for tap in 0..8 {
                    let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                    let zr = &z[(co * 8 + tap) * vin..(co * 8 + tap + 1) * vin];
                    for i in 0..xd {
                        for j in 0..yd {
                            let dst = ((2 * i + a) * oy + 2 * j + bb) * oz + c;
                            let src = (i * yd + j) * zd;
                            for kz in 0..zd {
                                out[dst + 2 * kz] = zr[src + kz] + b;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [xd, yd, zd] = x.spatial();
        let vin = xd * yd * zd;
        let rows = self.out_c * 8;
        let (oy, oz) = (2 * yd, 2 * zd);
        let mut dz = vec![T::zero(); rows * vin];
        let mut dx = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let dyn_ = dy.sample(n);
            for co in 0..self.out_c {
                let g = &dyn_[co * 8 * vin..(co + 1) * 8 * vin];
                let s: T = g.iter().copied().sum();
                self.bias.grad[co] += s;
                for tap in 0..8 {
                    let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                    let zr = &mut dz[(co * 8 + tap) * vin..(co * 8 + tap + 1) * vin];
                    for i in 0..xd {
                        for j in 0..yd {
                            let src = ((2 * i + a) * oy + 2 * j + bb) * oz + c;
                            let dst = (i * yd + j) * zd;
                            for kz in 0..zd {
                                zr[dst + kz] = g[src + 2 * kz];
                            }
                        }
                    }
                }
            }
            // dX (in × V) = W (in × out·8) · dZ
            matmul(self.in_c, rows, vin, &self.weight.value, false, &dz, false, dx.sample_mut(n), T::zero());
            // dW (in × out·8) += X (in × V) · dZᵀ
            matmul(self.in_c, vin, rows, x.sample(n), false, &dz, true, &mut self.weight.grad, T::one());
        }
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm3d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var_unbiased: Vec<T>,
}

impl<T: Real> BatchNorm3d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm3d {
            channels,
            gamma: Param::filled(format!("{name}.gamma"), ParamKind::NormScale, vec![channels], T::one()),
            beta: Param::filled(format!("{name}.beta"), ParamKind::NormShift, vec![channels], T::zero()),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![T::zero(); channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![T::one(); channels],
            },
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        let eps = T::lit(BN_EPS);
        for c in 0..self.channels {
            let scale = self.gamma.value[c] / (self.running_var.value[c] + eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
            for n in 0..x.batch() {
                for v in y.channel_mut(n, c) {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let m = (x.batch() * x.voxels()) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(self.channels);
        let mut means = Vec::with_capacity(self.channels);
        let mut vars = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut sum = 0.0f64;
            for n in 0..x.batch() {
                sum += x.channel(n, c).iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for n in 0..x.batch() {
                sq += x.channel(n, c).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for n in 0..x.batch() {
                let xh = xhat.channel_mut(n, c);
                for v in xh.iter_mut() {
                    *v = (*v - mean_t) * istd_t;
                }
                let yc = y.channel_mut(n, c);
                for (o, &h) in yc.iter_mut().zip(xhat.channel(n, c)) {
                    *o = g * h + b;
                }
            }
            inv_std.push(istd_t);
            means.push(mean_t);
            vars.push(T::lit(if m > 1.0 { sq / (m - 1.0) } else { var }));
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mean: means,
                var_unbiased: vars,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let mom = T::lit(BN_MOMENTUM);
        for c in 0..self.channels {
            let rm = &mut self.running_mean.value[c];
            *rm = (T::one() - mom) * *rm + mom * cache.mean[c];
            let rv = &mut self.running_var.value[c];
            *rv = (T::one() - mom) * *rv + mom * cache.var_unbiased[c];
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let batch = dy.batch();
        let m = T::lit((batch * dy.voxels()) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for c in 0..self.channels {
            let mut dbeta = T::zero();
            let mut dgamma = T::zero();
            for n in 0..batch {
                for (&g, &h) in dy.channel(n, c).iter().zip(cache.xhat.channel(n, c)) {
                    dbeta += g;
                    dgamma += g * h;
                }
            }
            self.beta.grad[c] += dbeta;
            self.gamma.grad[c] += dgamma;
            let k = self.gamma.value[c] * cache.inv_std[c] / m;
            for n in 0..batch {
                let out = dx.channel_mut(n, c);
                for ((o, &g), &h) in out.iter_mut().zip(dy.channel(n, c)).zip(cache.xhat.channel(n, c)) {
                    *o = k * (m * g - dbeta - h * dgamma);
                }
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Convolution, optional batch normalization, optional ReLU.
#[derive(Clone, Debug)]
pub struct Unit<T> {
    pub conv: Conv3d<T>,
    pub norm: Option<BatchNorm3d<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct UnitCache<T> {
    input: Tensor<T>,
    norm: Option<BnCache<T>>,
    output: Tensor<T>,
}

fn relu_in_place<T: Real>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the activation was clipped.
fn relu_backward<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

impl<T: Real> Unit<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.conv.forward(x);
        if let Some(bn) = &self.norm {
            h = bn.forward_eval(&h);
        }
        if self.relu {
            relu_in_place(&mut h);
        }
        h
    }

    pub fn forward_train(&self, x: &Tensor<T>, amp: bool) -> (Tensor<T>, UnitCache<T>) {
        let mut h = self.conv.forward(x);
        if amp {
            h.data_mut().iter_mut().for_each(|v| *v = v.reduced());
        }
        let mut norm_cache = None;
        if let Some(bn) = &self.norm {
            let (y, c) = bn.forward_train(&h);
            h = y;
            norm_cache = Some(c);
        }
        if self.relu {
            relu_in_place(&mut h);
        }
        let cache = UnitCache {
            input: x.clone(),
            norm: norm_cache,
            output: h.clone(),
        };
        (h, cache)
    }

    pub fn update_running(&mut self, cache: &UnitCache<T>) {
        if let (Some(bn), Some(c)) = (self.norm.as_mut(), cache.norm.as_ref()) {
            bn.update_running(c);
        }
    }

    pub fn backward(&mut self, cache: &UnitCache<T>, mut dy: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        if self.relu {
            relu_backward(&cache.output, &mut dy);
        }
        if let (Some(bn), Some(c)) = (self.norm.as_mut(), cache.norm.as_ref()) {
            dy = bn.backward(c, &dy);
        }
        self.conv.backward(&cache.input, &dy, need_dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.conv.params().into();
        if let Some(bn) = &self.norm {
            v.extend(bn.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.conv.params_mut().into();
        if let Some(bn) = self.norm.as_mut() {
            v.extend(bn.params_mut());
        }
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.norm
            .as_ref()
            .map(|bn| vec![&bn.running_mean, &bn.running_var])
            .unwrap_or_default()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.norm
            .as_mut()
            .map(|bn| vec![&mut bn.running_mean, &mut bn.running_var])
            .unwrap_or_default()
    }
}

/// Stack of conv units with an optional shortcut around it.
///
/// With `residual`, the last unit skips its ReLU; the block output is
/// `relu(units(x) + shortcut(x))` where the shortcut is the identity or a 1×1×1
/// projection when channel counts differ.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub units: Vec<Unit<T>>,
    pub proj: Option<Conv3d<T>>,
    pub residual: bool,
}

#[derive(Clone, Debug)]
pub struct ResCache<T> {
    units: Vec<UnitCache<T>>,
    input: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Real> ResBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_c: usize,
        out_c: usize,
        convs: usize,
        k: usize,
        residual: bool,
        norm: bool,
        rng: &mut R,
    ) -> Self {
        let units = (0..convs)
            .map(|i| {
                let cin = if i == 0 { in_c } else { out_c };
                let uname = format!("{name}.conv{}", i + 1);
                Unit {
                    conv: Conv3d::new(&uname, cin, out_c, k, 1, k / 2, 2.0, rng),
                    norm: norm.then(|| BatchNorm3d::new(&format!("{name}.norm{}", i + 1), out_c)),
                    relu: !(residual && i + 1 == convs),
                }
            })
            .collect();
        let proj = (residual && in_c != out_c)
            .then(|| Conv3d::new(&format!("{name}.proj"), in_c, out_c, 1, 1, 0, 1.0, rng));
        ResBlock { units, proj, residual }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for u in &self.units {
            h = u.forward(&h);
        }
        if self.residual {
            match &self.proj {
                Some(p) => h.add_assign(&p.forward(x)),
                None => h.add_assign(x),
            }
            relu_in_place(&mut h);
        }
        h
    }

    pub fn forward_train(&self, x: &Tensor<T>, amp: bool) -> (Tensor<T>, ResCache<T>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.units.len());
        for u in &self.units {
            let (y, c) = u.forward_train(&h, amp);
            h = y;
            caches.push(c);
        }
        if self.residual {
            match &self.proj {
                Some(p) => h.add_assign(&p.forward(x)),
                None => h.add_assign(x),
            }
            relu_in_place(&mut h);
        }
        let cache = ResCache {
            units: caches,
            input: x.clone(),
            output: h.clone(),
        };
        (h, cache)
    }

    pub fn update_running(&mut self, cache: &ResCache<T>) {
        for (u, c) in self.units.iter_mut().zip(&cache.units) {
            u.update_running(c);
        }
    }

    pub fn backward(&mut self, cache: &ResCache<T>, mut dy: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let shortcut_grad = if self.residual {
            relu_backward(&cache.output, &mut dy);
            Some(dy.clone())
        } else {
            None
        };
        let last = self.units.len() - 1;
        let mut g = Some(dy);
        for i in (0..=last).rev() {
            let need = i > 0 || need_dx;
            g = self.units[i].backward(&cache.units[i], g.expect("chained gradient"), need);
        }
        match (shortcut_grad, self.proj.as_mut()) {
            (Some(sg), Some(p)) => {
                let d = p.backward(&cache.input, &sg, need_dx);
                if let (Some(g), Some(d)) = (g.as_mut(), d) {
                    g.add_assign(&d);
                }
            }
            (Some(sg), None) => {
                if let Some(g) = g.as_mut() {
                    g.add_assign(&sg);
                }
            }
            _ => {}
        }
        g
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.units.iter().flat_map(|u| u.params()).collect();
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.units.iter_mut().flat_map(|u| u.params_mut()).collect();
        if let Some(p) = self.proj.as_mut() {
            v.extend(p.params_mut());
        }
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.units.iter().flat_map(|u| u.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.units.iter_mut().flat_map(|u| u.buffers_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 5], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct (non-im2col) convolution oracle.
    fn conv_direct(c: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let d = x.spatial();
        let o = c.out_dims(d);
        let mut y = Tensor::zeros([x.batch(), c.out_c, o[0], o[1], o[2]]);
        let k = c.k;
        for n in 0..x.batch() {
            for co in 0..c.out_c {
                for ox in 0..o[0] {
                    for oy in 0..o[1] {
                        for oz in 0..o[2] {
                            let mut acc = c.bias.value[co];
                            for ci in 0..c.in_c {
                                for kx in 0..k {
                                    for ky in 0..k {
                                        for kz in 0..k {
                                            let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                            let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                            let iz = (oz * c.stride + kz) as isize - c.pad as isize;
                                            if ix < 0 || iy < 0 || iz < 0 || ix >= d[0] as isize || iy >= d[1] as isize || iz >= d[2] as isize {
                                                continue;
                                            }
                                            let w = c.weight.value[(((co * c.in_c + ci) * k + kx) * k + ky) * k + kz];
                                            let xv = x.channel(n, ci)[(ix as usize * d[1] + iy as usize) * d[2] + iz as usize];
                                            acc += w * xv;
                                        }
                                    }
                                }
                            }
                            y.channel_mut(n, co)[(ox * o[1] + oy) * o[2] + oz] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut c = Conv3d::<f64>::new("c", 2, 3, k, s, p, 2.0, &mut rng);
            c.bias.value = vec![0.1, -0.2, 0.3];
            let x = rand_tensor([2, 2, 4, 6, 5], 7);
            let y = c.forward(&x);
            let o = conv_direct(&c, &x);
            assert_eq!(y.shape(), o.shape());
            for (a, b) in y.data().iter().zip(o.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slabbed_conv_matches_oracle_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            let c = Conv3d::<f64>::new("c", 8, 2, 3, stride, 1, 2.0, &mut rng);
            let x = rand_tensor([1, 8, 21, 80, 8], 4);
            let o = c.out_dims(x.spatial());
            assert!(c.slab_planes(o) < o[0], "needs several slabs");
            let y = c.forward(&x);
            for (a, b) in y.data().iter().zip(conv_direct(&c, &x).data()) {
                assert!((a - b).abs() < 1e-12);
            }
            // Bias is zero, so the map is linear in both x and W:
            // <y, r> = <x, dx> = <W, dW>.
            let r = rand_tensor(y.shape(), 6);
            let mut c = c;
            let dx = c.backward(&x, &r, true).unwrap();
            let yr: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let xdx: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let wdw: f64 = c.weight.value.iter().zip(&c.weight.grad).map(|(a, b)| a * b).sum();
            assert!((yr - xdx).abs() < 1e-9 * yr.abs().max(1.0), "{yr} vs {xdx}");
            assert!((yr - wdw).abs() < 1e-9 * yr.abs().max(1.0), "{yr} vs {wdw}");
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = Conv3d::<f64>::new("c", 1, 1, 3, 1, 1, 2.0, &mut rng);
        c.weight.value.iter_mut().for_each(|w| *w = 0.0);
        c.weight.value[13] = 1.0;
        let x = rand_tensor([1, 1, 4, 4, 4], 11);
        assert_eq!(c.forward(&x), x);
    }

    /// Finite-difference check of a scalar objective `sum(y * r)`.
    fn fd_check<F>(mut f: F, x: &mut [f64], analytic: &[f64], stride: usize)
    where
        F: FnMut(&[f64]) -> f64,
    {
        let h = 1e-5;
        for i in (0..x.len()).step_by(stride) {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let dn = f(x);
            x[i] = orig;
            let num = (up - dn) / (2.0 * h);
            let tol = 1e-6 * (1.0 + num.abs());
            assert!((num - analytic[i]).abs() < tol, "index {i}: numeric {num} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut c = Conv3d::<f64>::new("c", 2, 2, k, s, p, 2.0, &mut rng);
            let x = rand_tensor([2, 2, 4, 4, 6], 9);
            let r = rand_tensor(c.forward(&x).shape(), 10);
            let dx = c.backward(&x, &r, true).unwrap();
            let obj = |c: &Conv3d<f64>, x: &Tensor<f64>| {
                c.forward(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut xv = x.data().to_vec();
            fd_check(|v| obj(&c, &Tensor::from_vec(x.shape(), v.to_vec())), &mut xv, dx.data(), 7);
            let gw = c.weight.grad.clone();
            let mut wv = c.weight.value.clone();
            let mut probe = c.clone();
            fd_check(
                |v| {
                    probe.weight.value = v.to_vec();
                    obj(&probe, &x)
                },
                &mut wv,
                &gw,
                3,
            );
            let gb = c.bias.grad.clone();
            let mut bv = c.bias.value.clone();
            let mut probe = c.clone();
            fd_check(
                |v| {
                    probe.bias.value = v.to_vec();
                    obj(&probe, &x)
                },
                &mut bv,
                &gb,
                1,
            );
        }
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = ConvTranspose3d::<f64>::new("up", 3, 2, &mut rng);
        t.bias.value = vec![0.5, -0.5];
        let x = rand_tensor([2, 3, 2, 3, 2], 12);
        let y = t.forward(&x);
        assert_eq!(y.shape(), [2, 2, 4, 6, 4]);
        let r = rand_tensor(y.shape(), 13);
        let dx = t.backward(&x, &r);
        let obj = |t: &ConvTranspose3d<f64>, x: &Tensor<f64>| {
            t.forward(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut xv = x.data().to_vec();
        fd_check(|v| obj(&t, &Tensor::from_vec(x.shape(), v.to_vec())), &mut xv, dx.data(), 1);
        let gw = t.weight.grad.clone();
        let mut wv = t.weight.value.clone();
        let mut probe = t.clone();
        fd_check(
            |v| {
                probe.weight.value = v.to_vec();
                obj(&probe, &x)
            },
            &mut wv,
            &gw,
            1,
        );
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut bn = BatchNorm3d::<f64>::new("bn", 2);
        bn.gamma.value = vec![1.5, 0.7];
        bn.beta.value = vec![0.1, -0.3];
        let x = rand_tensor([2, 2, 2, 2, 3], 21);
        let (y, cache) = bn.forward_train(&x);
        let r = rand_tensor(y.shape(), 22);
        let dx = bn.backward(&cache, &r);
        let obj = |bn: &BatchNorm3d<f64>, x: &Tensor<f64>| {
            bn.forward_train(x).0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut xv = x.data().to_vec();
        fd_check(|v| obj(&bn, &Tensor::from_vec(x.shape(), v.to_vec())), &mut xv, dx.data(), 1);
        let gg = bn.gamma.grad.clone();
        let mut gv = bn.gamma.value.clone();
        let mut probe = bn.clone();
        fd_check(
            |v| {
                probe.gamma.value = v.to_vec();
                obj(&probe, &x)
            },
            &mut gv,
            &gg,
            1,
        );
    }

    #[test]
    fn batchnorm_train_output_is_normalized_and_running_stats_update() {
        let mut bn = BatchNorm3d::<f64>::new("bn", 1);
        let x = Tensor::from_vec([1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, cache) = bn.forward_train(&x);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        bn.update_running(&cache);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
        // Unbiased variance of 1..4 is 5/3.
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
