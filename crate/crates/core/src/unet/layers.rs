//! Network layers with hand-written backward passes.
//!
//! Each `backward` takes the forward input (or whatever the layer cached),
//! the upstream gradient, and a same-shaped layer that accumulates the
//! parameter gradients; it returns the gradient with respect to the input.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, gemm_strided, Tensor};

fn he_normal<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Same-padded, stride-1 3D convolution with a cubic odd kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][kz][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let taps = kernel.pow(3);
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: he_normal(out_channels * in_channels * taps, in_channels * taps, rng),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    /// Number of `(z, y)` lines per im2col tile, keeping the tile near 1 MB.
    fn lines_per_tile(&self, dims: [usize; 3]) -> usize {
        ((1 << 15) / (self.rows() * dims[2])).clamp(1, dims[0] * dims[1])
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let v = x.voxels();
        let mut out = Tensor::zeros(self.out_channels, x.dims);
        for (c, chunk) in out.data.chunks_exact_mut(v).enumerate() {
            chunk.fill(self.bias[c]);
        }
        let rows = self.rows();
        if self.kernel == 1 {
            gemm(self.out_channels, rows, v, &self.weight, (rows, 1), &x.data, (v, 1), 1.0, &mut out.data);
            return out;
        }
        let w = x.dims[2];
        let lines = x.dims[0] * x.dims[1];
        let step = self.lines_per_tile(x.dims);
        let mut col = vec![0.0; rows * step * w];
        for l0 in (0..lines).step_by(step) {
            let l1 = (l0 + step).min(lines);
            let n = (l1 - l0) * w;
            im2col_tile(x, self.kernel, l0..l1, &mut col[..rows * n]);
            gemm_strided(
                self.out_channels,
                rows,
                n,
                &self.weight,
                (rows, 1),
                &col,
                (n, 1),
                1.0,
                &mut out.data[l0 * w..],
                v,
            );
        }
        out
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Conv3d) -> Tensor {
        let v = x.voxels();
        let rows = self.rows();
        for (c, chunk) in dy.data.chunks_exact(v).enumerate() {
            grad.bias[c] += chunk.iter().sum::<f64>();
        }
        if self.kernel == 1 {
            gemm(self.out_channels, v, rows, &dy.data, (v, 1), &x.data, (1, v), 1.0, &mut grad.weight);
            let mut dx = Tensor::zeros(self.in_channels, x.dims);
            gemm(rows, self.out_channels, v, &self.weight, (1, rows), &dy.data, (v, 1), 0.0, &mut dx.data);
            return dx;
        }
        let w = x.dims[2];
        let lines = x.dims[0] * x.dims[1];
        let step = self.lines_per_tile(x.dims);
        let mut col = vec![0.0; rows * step * w];
        let mut dcol = vec![0.0; rows * step * w];
        let mut dx = Tensor::zeros(self.in_channels, x.dims);
        for l0 in (0..lines).step_by(step) {
            let l1 = (l0 + step).min(lines);
            let n = (l1 - l0) * w;
            let dy_tile = &dy.data[l0 * w..];
            im2col_tile(x, self.kernel, l0..l1, &mut col[..rows * n]);
            gemm(self.out_channels, n, rows, dy_tile, (v, 1), &col, (1, n), 1.0, &mut grad.weight);
            gemm(rows, self.out_channels, n, &self.weight, (1, rows), dy_tile, (v, 1), 0.0, &mut dcol[..rows * n]);
            col2im_tile(&dcol[..rows * n], &mut dx, self.kernel, l0..l1);
        }
        dx
    }
}

/// Visits every (row, line, x-run) pairing of the zero-padded patch matrix
/// restricted to the `(z, y)` lines in `lines`, where line `l` is
/// `(l / h, l % h)`. `f(src_offset, dst_offset, len)` copies a contiguous
/// x-run; destinations index a `rows × (lines.len() * w)` tile.
fn for_each_tap_run(channels: usize, dims: [usize; 3], kernel: usize, lines: Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = dims;
    let pad = (kernel / 2) as isize;
    let v = d * h * w;
    let n = lines.len() * w;
    let mut row = 0;
    for c in 0..channels {
        for kz in 0..kernel {
            let oz = kz as isize - pad;
            for ky in 0..kernel {
                let oy = ky as isize - pad;
                for kx in 0..kernel {
                    let ox = kx as isize - pad;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x_lo < x_hi {
                        for l in lines.clone() {
                            let sz = (l / h) as isize + oz;
                            let sy = (l % h) as isize + oy;
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = c * v + (sz as usize * h + sy as usize) * w + (x_lo as isize + ox) as usize;
                            let dst = row * n + (l - lines.start) * w + x_lo;
                            f(src, dst, x_hi - x_lo);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col_tile(x: &Tensor, kernel: usize, lines: Range<usize>, col: &mut [f64]) {
    col.fill(0.0);
    for_each_tap_run(x.channels, x.dims, kernel, lines, |src, dst, len| {
        col[dst..dst + len].copy_from_slice(&x.data[src..src + len]);
    });
}

fn col2im_tile(col: &[f64], out: &mut Tensor, kernel: usize, lines: Range<usize>) {
    for_each_tap_run(out.channels, out.dims, kernel, lines, |src, dst, len| {
        for (o, c) in out.data[src..src + len].iter_mut().zip(&col[dst..dst + len]) {
            *o += c;
        }
    });
}

#[cfg(test)]
pub(crate) fn im2col(x: &Tensor, kernel: usize) -> Vec<f64> {
    let mut col = vec![0.0; x.channels * kernel.pow(3) * x.voxels()];
    im2col_tile(x, kernel, 0..x.dims[0] * x.dims[1], &mut col);
    col
}

#[cfg(test)]
pub(crate) fn col2im(col: &[f64], channels: usize, dims: [usize; 3], kernel: usize) -> Tensor {
    let mut out = Tensor::zeros(channels, dims);
    col2im_tile(col, &mut out, kernel, 0..dims[0] * dims[1]);
    out
}

/// `f(x) = max(0, x) - α·max(0, -x)` with one α per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRelu {
    pub alpha: Vec<f64>,
}

pub fn prelu(x: f64, alpha: f64) -> f64 {
    x.max(0.0) - alpha * (-x).max(0.0)
}

impl PRelu {
    pub fn new(channels: usize, init: f64) -> Self {
        Self {
            alpha: vec![init; channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.alpha.len(), 0.0)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let v = x.voxels();
        let mut out = x.clone();
        for (c, chunk) in out.data.chunks_exact_mut(v).enumerate() {
            let a = self.alpha[c];
            for e in chunk {
                *e = prelu(*e, a);
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut PRelu) -> Tensor {
        let v = x.voxels();
        let mut dx = dy.clone();
        for c in 0..x.channels {
            let a = self.alpha[c];
            let mut da = 0.0;
            for ((g, &xi), &gi) in dx.data[c * v..(c + 1) * v]
                .iter_mut()
                .zip(x.channel(c))
                .zip(dy.channel(c))
            {
                if xi <= 0.0 {
                    da += xi * gi;
                    *g = a * gi;
                }
            }
            grad.alpha[c] += da;
        }
        dx
    }
}

/// Per-sample, per-channel normalization with learned scale and shift.
///
/// Statistics always come from the feature map itself; no running averages
/// are kept, so training and inference normalize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Normalized activations and per-channel inverse std from a forward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// `(x - mean) / sqrt(var + eps)` per channel, before scale/shift.
pub fn inference_normalize(x: &Tensor, eps: f64) -> NormCache {
    let v = x.voxels() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.channels);
    for chunk in xhat.data.chunks_exact_mut(x.voxels()) {
        let mean = chunk.iter().sum::<f64>() / v;
        let var = chunk.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / v;
        let inv = 1.0 / (var + eps).sqrt();
        for e in chunk.iter_mut() {
            *e = (*e - mean) * inv;
        }
        inv_std.push(inv);
    }
    NormCache { xhat, inv_std }
}

impl InstanceNorm {
    pub fn new(channels: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        let cache = inference_normalize(x, self.eps);
        let mut out = cache.xhat.clone();
        for (c, chunk) in out.data.chunks_exact_mut(x.voxels()).enumerate() {
            let (g, b) = (self.gamma[c], self.beta[c]);
            for e in chunk {
                *e = g * *e + b;
            }
        }
        (out, cache)
    }

    pub fn backward(&self, cache: &NormCache, dy: &Tensor, grad: &mut InstanceNorm) -> Tensor {
        let v = dy.voxels();
        let n = v as f64;
        let mut dx = Tensor::zeros(dy.channels, dy.dims);
        for c in 0..dy.channels {
            let xh = cache.xhat.channel(c);
            let g = dy.channel(c);
            let sum_g: f64 = g.iter().sum();
            let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            grad.gamma[c] += sum_gx;
            grad.beta[c] += sum_g;
            let scale = self.gamma[c] * cache.inv_std[c];
            let (mg, mgx) = (sum_g / n, sum_gx / n);
            for ((d, &gi), &xi) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *d = scale * (gi - mg - xi * mgx);
            }
        }
        dx
    }
}

/// 2×2×2 max pooling; returns the pooled map and each window's argmax.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [d, h, w] = x.dims;
    let od = [d / 2, h / 2, w / 2];
    let mut out = Tensor::zeros(x.channels, od);
    let mut arg = vec![0u32; out.data.len()];
    let ov = out.voxels();
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let i = ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + e;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = c * ov + (z * od[1] + y) * od[2] + xx;
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dy: &Tensor, arg: &[u32], input_dims: [usize; 3]) -> Tensor {
    let mut dx = Tensor::zeros(dy.channels, input_dims);
    let (ov, iv) = (dy.voxels(), dx.voxels());
    for c in 0..dy.channels {
        for o in 0..ov {
            dx.data[c * iv + arg[c * ov + o] as usize] += dy.data[c * ov + o];
        }
    }
    dx
}

/// Stride-2, kernel-2 transposed convolution (doubles each spatial side).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpConv {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[offset (a·4 + b·2 + c)][out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl UpConv {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: he_normal(8 * out_channels * in_channels, in_channels, rng),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    fn offsets() -> impl Iterator<Item = (usize, [usize; 3])> {
        (0..8).map(|o| (o, [o >> 2, (o >> 1) & 1, o & 1]))
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [d, h, w] = x.dims;
        let vin = x.voxels();
        let (co, ci) = (self.out_channels, self.in_channels);
        let mut out = Tensor::zeros(co, [2 * d, 2 * h, 2 * w]);
        let ov = out.voxels();
        let mut tmp = vec![0.0; co * vin];
        for (o, [a, b, e]) in Self::offsets() {
            let wo = &self.weight[o * co * ci..(o + 1) * co * ci];
            gemm(co, ci, vin, wo, (ci, 1), &x.data, (vin, 1), 0.0, &mut tmp);
            for c in 0..co {
                let bias = self.bias[c];
                for z in 0..d {
                    for y in 0..h {
                        let src = c * vin + (z * h + y) * w;
                        let dst = c * ov + ((2 * z + a) * 2 * h + 2 * y + b) * 2 * w + e;
                        for xx in 0..w {
                            out.data[dst + 2 * xx] = tmp[src + xx] + bias;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut UpConv) -> Tensor {
        let [d, h, w] = x.dims;
        let vin = x.voxels();
        let (co, ci) = (self.out_channels, self.in_channels);
        let ov = dy.voxels();
        for c in 0..co {
            grad.bias[c] += dy.channel(c).iter().sum::<f64>();
        }
        let mut dx = Tensor::zeros(ci, x.dims);
        let mut g = vec![0.0; co * vin];
        for (o, [a, b, e]) in Self::offsets() {
            for c in 0..co {
                for z in 0..d {
                    for y in 0..h {
                        let dst = c * vin + (z * h + y) * w;
                        let src = c * ov + ((2 * z + a) * 2 * h + 2 * y + b) * 2 * w + e;
                        for xx in 0..w {
                            g[dst + xx] = dy.data[src + 2 * xx];
                        }
                    }
                }
            }
            let range = o * co * ci..(o + 1) * co * ci;
            gemm(co, vin, ci, &g, (vin, 1), &x.data, (1, vin), 1.0, &mut grad.weight[range.clone()]);
            gemm(ci, co, vin, &self.weight[range], (1, ci), &g, (vin, 1), 1.0, &mut dx.data);
        }
        dx
    }
}
