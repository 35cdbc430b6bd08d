//! Small CPU building blocks with hand-written backpropagation.
//!
//! Activations are planar `f32` buffers laid out `[channels][height][width]`
//! for a single sample. Gradients accumulate into [`Param::grad`] across a
//! batch and are consumed by [`Adam`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    /// He-normal initialization for a layer with `fan_in` inputs.
    pub fn he<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::new((0..n).map(|_| normal.sample(rng) as f32).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter, scaling gradients by `scale`
    /// (typically `1 / batch`), then clear the gradients.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, scale: f32) {
        self.step += 1;
        let c = &self.config;
        let b1 = c.beta1 as f32;
        let b2 = c.beta2 as f32;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let eps = (c.epsilon * bc2.sqrt()) as f32;
        for p in params {
            for i in 0..p.value.len() {
                let g = p.grad[i] * scale;
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr * p.m[i] / (p.v[i].sqrt() + eps);
                p.grad[i] = 0.0;
            }
        }
    }
}

/// Spatial extent of a planar activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
}

impl Plane {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn area(self) -> usize {
        self.h * self.w
    }

    fn downsampled(self, stride: usize) -> Self {
        Self {
            h: self.h.div_ceil(stride),
            w: self.w.div_ceil(stride),
        }
    }
}

/// 3x3 convolution with zero padding of one pixel and stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// `[cout][cin][3][3]`
    pub weight: Param,
    pub bias: Param,
}

/// Valid output index range `[lo, hi)` along one axis for kernel offset `d`
/// (in `-1..=1`), where input index = `o * stride + d`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    // largest o with o*stride + d < in_len
    let limit = in_len as isize - d;
    let hi = if limit <= 0 {
        0
    } else {
        ((limit as usize - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        Self {
            cin,
            cout,
            stride,
            weight: Param::he(cout * cin * 9, cin * 9, rng),
            bias: Param::zeros(cout),
        }
    }

    pub fn output_plane(&self, input: Plane) -> Plane {
        input.downsampled(self.stride)
    }

    pub fn forward(&self, input: &[f32], plane: Plane) -> Vec<f32> {
        let op = self.output_plane(plane);
        let (ia, oa) = (plane.area(), op.area());
        debug_assert_eq!(input.len(), self.cin * ia);
        let mut out = vec![0.0f32; self.cout * oa];
        let w = &self.weight.value;
        for o in 0..self.cout {
            let dst = &mut out[o * oa..(o + 1) * oa];
            dst.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for c in 0..self.cin {
                let src = &input[c * ia..(c + 1) * ia];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(op.h, plane.h, self.stride, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(op.w, plane.w, self.stride, dx);
                        let k = w[((o * self.cin + c) * 3 + ky) * 3 + kx];
                        for y in y0..y1 {
                            let iy = (y * self.stride) as isize + dy;
                            let irow = &src[iy as usize * plane.w..(iy as usize + 1) * plane.w];
                            let orow = &mut dst[y * op.w..(y + 1) * op.w];
                            if self.stride == 1 {
                                let ix0 = (x0 as isize + dx) as usize;
                                let n = x1 - x0;
                                for (ov, iv) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + n]) {
                                    *ov += k * iv;
                                }
                            } else {
                                for x in x0..x1 {
                                    let ix = (x * self.stride) as isize + dx;
                                    orow[x] += k * irow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients and return the gradient with respect to
    /// the input.
    pub fn backward(&mut self, input: &[f32], plane: Plane, grad_out: &[f32]) -> Vec<f32> {
        let op = self.output_plane(plane);
        let (ia, oa) = (plane.area(), op.area());
        let mut grad_in = vec![0.0f32; self.cin * ia];
        for o in 0..self.cout {
            let g = &grad_out[o * oa..(o + 1) * oa];
            self.bias.grad[o] += g.iter().sum::<f32>();
            for c in 0..self.cin {
                let src = &input[c * ia..(c + 1) * ia];
                let gin = &mut grad_in[c * ia..(c + 1) * ia];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(op.h, plane.h, self.stride, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(op.w, plane.w, self.stride, dx);
                        let widx = ((o * self.cin + c) * 3 + ky) * 3 + kx;
                        let k = self.weight.value[widx];
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            let iy = ((y * self.stride) as isize + dy) as usize;
                            let grow = &g[y * op.w..(y + 1) * op.w];
                            let irow = &src[iy * plane.w..(iy + 1) * plane.w];
                            let girow = &mut gin[iy * plane.w..(iy + 1) * plane.w];
                            if self.stride == 1 {
                                let ix0 = (x0 as isize + dx) as usize;
                                let n = x1 - x0;
                                let gs = &grow[x0..x1];
                                acc += dot(gs, &irow[ix0..ix0 + n]);
                                for (giv, gv) in girow[ix0..ix0 + n].iter_mut().zip(gs) {
                                    *giv += k * gv;
                                }
                            } else {
                                for x in x0..x1 {
                                    let ix = ((x * self.stride) as isize + dx) as usize;
                                    acc += grow[x] * irow[ix];
                                    girow[ix] += k * grow[x];
                                }
                            }
                        }
                        self.weight.grad[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Dot product with independent lane accumulators so it vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..n {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

/// Fully connected layer, `weight` is `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::he(inputs * outputs, inputs, rng),
            bias: Param::zeros(outputs),
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::zeros(inputs * outputs),
            bias: Param::zeros(outputs),
        }
    }

    pub fn forward(&self, input: &[f32]) -> Vec<f32> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                self.bias.value[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f32>()
            })
            .collect()
    }

    pub fn backward(&mut self, input: &[f32], grad_out: &[f32]) -> Vec<f32> {
        let mut grad_in = vec![0.0f32; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            self.bias.grad[o] += g;
            let base = o * self.inputs;
            for i in 0..self.inputs {
                self.weight.grad[base + i] += g * input[i];
                grad_in[i] += g * self.weight.value[base + i];
            }
        }
        grad_in
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Multiply `grad` in place by the ReLU derivative at `pre`.
pub fn relu_backward(pre: &[f32], grad: &mut [f32]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid32(v)).collect()
}

pub fn silu_backward(pre: &[f32], grad: &mut [f32]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        let s = sigmoid32(p);
        *g *= s * (1.0 + p * (1.0 - s));
    }
}

/// Add a per-channel offset to a planar activation.
pub fn add_channel_bias(x: &mut [f32], bias: &[f32], area: usize) {
    for (chunk, b) in x.chunks_mut(area).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sum of a planar gradient.
pub fn channel_sums(grad: &[f32], area: usize) -> Vec<f32> {
    grad.chunks(area).map(|c| c.iter().sum()).collect()
}

/// Sinusoidal embedding of a timestep, `dim` must be even.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin() as f32);
    }
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos() as f32);
    }
    out
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
