//! The landmark detector, appearance encoder, and decoder networks, built on
//! a minimal differentiable layer set: convolution, ReLU, and x2 bilinear
//! upsampling.
//!
//! All three nets are stacks of blocks with two conv layers each. The
//! detector/encoder downsample with stride-2 convs and double channels per
//! block; the decoder upsamples bilinearly and halves channels (floored).
//! Forward passes are pure reads over parameters and safe to run from many
//! threads; only the trainer mutates parameters.

use crate::bottleneck::{
    render_gaussians, render_gaussians_backward, softargmax_full, softargmax_full_backward,
    softargmax_separable_traced, FcBottleneck, FcTrace, GaussianMaps, KeypointSet, ScoreMaps,
    SeparableTrace,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// 2D convolution with same-padding, row-major `[out_c][in_c*k*k]` weights.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            w: vec![T::zero(); out_c * in_c * k * k],
            b: vec![T::zero(); out_c],
            in_c,
            out_c,
            k,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let (ic, h, w) = x.shape();
        let k = self.k;
        let p = self.pad() as isize;
        let s = self.stride;
        let mut col = vec![T::zero(); ic * k * k * oh * ow];
        let n = oh * ow;
        for ci in 0..ic {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * n..((ci * k + ky) * k + kx + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (_, h, w) = x.shape();
        let (oh, ow) = self.out_size(h, w);
        let n = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let col = self.im2col(x, oh, ow);
        let mut out = Vec::with_capacity(self.out_c * n);
        for oc in 0..self.out_c {
            out.extend(std::iter::repeat(self.b[oc]).take(n));
        }
        gemm_nn(self.out_c, kk, n, &self.w, &col, &mut out);
        Tensor::from_vec(self.out_c, oh, ow, out).expect("conv output shape")
    }

    /// Backprop; accumulates into `gw`/`gb` when provided and returns dx.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<(&mut [T], &mut [T])>,
    ) -> Tensor<T> {
        let (ic, h, w) = x.shape();
        let (oh, ow) = (dy.height(), dy.width());
        let n = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let col = self.im2col(x, oh, ow);

        if let Some((gw, gb)) = grads {
            // dW += dY * col^T
            gemm_nt(self.out_c, n, kk, dy.as_slice(), &col, gw);
            for oc in 0..self.out_c {
                let mut s = T::zero();
                for &v in dy.channel(oc) {
                    s += v;
                }
                gb[oc] += s;
            }
        }

        // dcol = W^T * dY, then scatter back (col2im)
        let mut dcol = vec![T::zero(); kk * n];
        gemm_tn(kk, self.out_c, n, &self.w, dy.as_slice(), &mut dcol);

        let k = self.k;
        let p = self.pad() as isize;
        let s = self.stride;
        let mut dx = Tensor::zeros(ic, h, w);
        for ci in 0..ic {
            let plane = dx.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &dcol[((ci * k + ky) * k + kx) * n..((ci * k + ky) * k + kx + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

fn upsample_table(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    // half-pixel-center mapping: src = (dst + 0.5) * in/out - 0.5
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
            let src = src.max(0.0).min((in_n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h * 2, w * 2);
    let ty = upsample_table(oh, h);
    let tx = upsample_table(ow, w);
    let mut out = Tensor::zeros(c, oh, ow);
    for ci in 0..c {
        let src = x.channel(ci);
        let dst = out.channel_mut(ci);
        for oy in 0..oh {
            let (y0, y1, fy) = ty[oy];
            let fy = T::from_f64_c(fy);
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                let (x0, x1, fx) = tx[ox];
                let fx = T::from_f64_c(fx);
                let top = r0[x0] * (T::one() - fx) + r0[x1] * fx;
                let bot = r1[x0] * (T::one() - fx) + r1[x1] * fx;
                drow[ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let (c, oh, ow) = dy.shape();
    let ty = upsample_table(oh, in_h);
    let tx = upsample_table(ow, in_w);
    let mut dx = Tensor::zeros(c, in_h, in_w);
    for ci in 0..c {
        let src = dy.channel(ci);
        let dst = dx.channel_mut(ci);
        for oy in 0..oh {
            let (y0, y1, fy) = ty[oy];
            let fy = T::from_f64_c(fy);
            for ox in 0..ow {
                let (x0, x1, fx) = tx[ox];
                let fx = T::from_f64_c(fx);
                let g = src[oy * ow + ox];
                dst[y0 * in_w + x0] += g * (T::one() - fx) * (T::one() - fy);
                dst[y0 * in_w + x1] += g * fx * (T::one() - fy);
                dst[y1 * in_w + x0] += g * (T::one() - fx) * fy;
                dst[y1 * in_w + x1] += g * fx * fy;
            }
        }
    }
    dx
}

/// One element of a sequential net.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Conv(Conv2d<T>),
    Relu,
    Upsample2x,
}

/// A sequential stack of ops with explicit forward/backward.
#[derive(Clone, Debug)]
pub struct Stack<T> {
    pub ops: Vec<Op<T>>,
}

impl<T: Scalar> Stack<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for op in &self.ops {
            cur = match op {
                Op::Conv(c) => c.forward(&cur),
                Op::Relu => cur.map(|v| v.max(T::zero())),
                Op::Upsample2x => upsample2x(&cur),
            };
        }
        cur
    }

    /// Forward keeping each op's input for the backward pass.
    pub fn forward_traced(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
        let mut trace = Vec::with_capacity(self.ops.len());
        let mut cur = x.clone();
        for op in &self.ops {
            let next = match op {
                Op::Conv(c) => c.forward(&cur),
                Op::Relu => cur.map(|v| v.max(T::zero())),
                Op::Upsample2x => upsample2x(&cur),
            };
            trace.push(cur);
            cur = next;
        }
        (cur, trace)
    }

    /// Backprop through the stack. `grads`, when given, must hold one slot per
    /// conv parameter in `[w0, b0, w1, b1, ...]` order; gradients accumulate.
    pub fn backward(
        &self,
        trace: &[Tensor<T>],
        dy: Tensor<T>,
        mut grads: Option<&mut [Vec<T>]>,
    ) -> Tensor<T> {
        let mut conv_idx = self.conv_count();
        let mut d = dy;
        for (op, input) in self.ops.iter().zip(trace.iter()).rev() {
            d = match op {
                Op::Conv(c) => {
                    conv_idx -= 1;
                    match grads.as_deref_mut() {
                        Some(slots) => {
                            let (gw_slice, rest) = slots[conv_idx * 2..].split_first_mut().unwrap();
                            let gb_slice = &mut rest[0];
                            c.backward(input, &d, Some((gw_slice, gb_slice)))
                        }
                        None => c.backward(input, &d, None),
                    }
                }
                Op::Relu => {
                    let mut dd = d;
                    for (g, &v) in dd.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    dd
                }
                Op::Upsample2x => upsample2x_backward(&d, input.height(), input.width()),
            };
        }
        d
    }

    pub fn conv_count(&self) -> usize {
        self.ops
            .iter()
            .filter(|o| matches!(o, Op::Conv(_)))
            .count()
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d<T>> {
        self.ops.iter().filter_map(|o| match o {
            Op::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d<T>> {
        self.ops.iter_mut().filter_map(|o| match o {
            Op::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(|c| c.w.len() + c.b.len()).sum()
    }

    /// Gaussian init for all conv weights, zero biases.
    pub fn init_gaussian(&mut self, std: f64, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for c in self.convs_mut() {
            for v in c.w.iter_mut() {
                *v = T::from_f64_c(normal.sample(rng));
            }
            for v in c.b.iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// He-style init (used by the fixed loss net so deep taps keep signal).
    pub fn init_he(&mut self, rng: &mut ChaCha8Rng) {
        for c in self.convs_mut() {
            let fan_in = c.in_c * c.k * c.k;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for v in c.w.iter_mut() {
                *v = T::from_f64_c(normal.sample(rng));
            }
            for v in c.b.iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// Zero-filled gradient slots aligned with this stack's parameters.
    pub fn alloc_grads(&self) -> Vec<Vec<T>> {
        let mut slots = Vec::with_capacity(self.conv_count() * 2);
        for c in self.convs() {
            slots.push(vec![T::zero(); c.w.len()]);
            slots.push(vec![T::zero(); c.b.len()]);
        }
        slots
    }
}

/// Detector/encoder topology per the shared block rule.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input images are `input_size x input_size`, a power of two >= 16.
    pub input_size: usize,
    /// Number of discovered landmarks.
    pub k: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    pub base_channels: usize,
    /// Score maps and rendered heatmaps are `heatmap_size^2`.
    pub heatmap_size: usize,
    /// Gaussian rendering std, in normalized coordinate units.
    pub sigma: f64,
    /// Separable soft-argmax (default) or full 2D softmax.
    pub separable: bool,
    pub decoder_start_channels: usize,
    pub decoder_min_channels: usize,
    pub out_channels: usize,
    /// Weight init. The fixed-std Gaussian is the reference setting; its
    /// effective layer gain is `std * sqrt(fan_in)`, so narrow desk-scale
    /// nets need the fan-in-scaled variant to train in few steps.
    pub init: InitScheme,
    pub init_std: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Gaussian,
    He,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            k: 10,
            first_kernel: 7,
            kernel: 3,
            base_channels: 32,
            heatmap_size: 16,
            sigma: 0.1,
            separable: true,
            decoder_start_channels: 256,
            decoder_min_channels: 32,
            out_channels: 3,
            init: InitScheme::Gaussian,
            init_std: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() || self.input_size < 16 {
            return Err(Error::invalid_config(format!(
                "input_size must be a power of two >= 16, got {}",
                self.input_size
            )));
        }
        if !self.heatmap_size.is_power_of_two() || self.heatmap_size < 2 {
            return Err(Error::invalid_config("heatmap_size must be a power of two >= 2"));
        }
        if self.input_size < self.heatmap_size {
            return Err(Error::invalid_config("input_size must be >= heatmap_size"));
        }
        if self.k < 1 {
            return Err(Error::invalid_config("k must be >= 1"));
        }
        if self.first_kernel % 2 == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid_config("kernels must be odd"));
        }
        if self.base_channels < 1 || self.decoder_start_channels < 1 || self.decoder_min_channels < 1
        {
            return Err(Error::invalid_config("channel counts must be >= 1"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid_config("sigma must be positive"));
        }
        Ok(())
    }

    /// Downsampling blocks: one per halving from input to heatmap, plus one.
    pub fn num_blocks(&self) -> usize {
        (self.input_size / self.heatmap_size).trailing_zeros() as usize + 1
    }

    /// Channel count entering the bottleneck (last detector block).
    pub fn encoder_out_channels(&self) -> usize {
        self.base_channels << (self.num_blocks() - 1)
    }
}

/// Fully-connected ablation settings; replaces the keypoint bottleneck.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    pub kind: BottleneckKind,
    /// Width of the fc code (ablation only).
    pub d: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    Keypoint,
    Fc,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            kind: BottleneckKind::Keypoint,
            d: 20,
        }
    }
}

/// Detector body: shared by the landmark net (with 1x1 head) and the
/// appearance encoder (head omitted).
fn build_body<T: Scalar>(cfg: &ModelConfig, in_channels: usize) -> Stack<T> {
    let mut ops = Vec::new();
    let mut ch = in_channels;
    for block in 0..cfg.num_blocks() {
        let out = cfg.base_channels << block;
        let (k, stride) = if block == 0 {
            (cfg.first_kernel, 1)
        } else {
            (cfg.kernel, 2)
        };
        ops.push(Op::Conv(Conv2d::new(ch, out, k, stride)));
        ops.push(Op::Relu);
        ops.push(Op::Conv(Conv2d::new(out, out, cfg.kernel, 1)));
        ops.push(Op::Relu);
        ch = out;
    }
    Stack { ops }
}

fn build_detector<T: Scalar>(cfg: &ModelConfig) -> Stack<T> {
    let mut stack = build_body::<T>(cfg, cfg.out_channels);
    let ch = cfg.encoder_out_channels();
    stack.ops.push(Op::Conv(Conv2d::new(ch, cfg.k, 1, 1)));
    stack
}

fn build_decoder<T: Scalar>(cfg: &ModelConfig) -> Stack<T> {
    let mut ops = Vec::new();
    let mut ch = cfg.encoder_out_channels() + cfg.k;
    let mut out = cfg.decoder_start_channels;
    for block in 0..cfg.num_blocks() {
        if block > 0 {
            ops.push(Op::Upsample2x);
            out = (out / 2).max(cfg.decoder_min_channels);
        }
        ops.push(Op::Conv(Conv2d::new(ch, out, cfg.kernel, 1)));
        ops.push(Op::Relu);
        ops.push(Op::Conv(Conv2d::new(out, out, cfg.kernel, 1)));
        ops.push(Op::Relu);
        ch = out;
    }
    // final conv to RGB with no non-linearity
    ops.push(Op::Conv(Conv2d::new(ch, cfg.out_channels, cfg.kernel, 1)));
    Stack { ops }
}

/// The full trainable system: detector, appearance encoder, decoder, and the
/// optional fc ablation bottleneck.
#[derive(Clone, Debug)]
pub struct LandmarkModel<T> {
    pub detector: Stack<T>,
    pub encoder: Stack<T>,
    pub decoder: Stack<T>,
    pub fc: Option<FcBottleneck<T>>,
    pub cfg: ModelConfig,
    pub bottleneck: BottleneckConfig,
}

impl<T: Scalar> LandmarkModel<T> {
    pub fn new(cfg: &ModelConfig, bottleneck: &BottleneckConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut model = LandmarkModel {
            detector: build_detector(cfg),
            encoder: build_body(cfg, cfg.out_channels),
            decoder: build_decoder(cfg),
            fc: match bottleneck.kind {
                BottleneckKind::Keypoint => None,
                BottleneckKind::Fc => Some(FcBottleneck::new(
                    bottleneck.d,
                    cfg.k,
                    (cfg.heatmap_size, cfg.heatmap_size),
                )?),
            },
            cfg: cfg.clone(),
            bottleneck: bottleneck.clone(),
        };
        model.init(seed);
        Ok(model)
    }

    /// Gaussian(0.01) weights, zero biases, split per sub-net streams.
    pub fn init(&mut self, seed: u64) {
        let scheme = self.cfg.init;
        let std = self.cfg.init_std;
        let init_stack = |stack: &mut Stack<T>, rng: &mut ChaCha8Rng| match scheme {
            InitScheme::Gaussian => stack.init_gaussian(std, rng),
            InitScheme::He => stack.init_he(rng),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(crate::warp::mix_seed(seed, 101));
        init_stack(&mut self.detector, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::warp::mix_seed(seed, 102));
        init_stack(&mut self.encoder, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::warp::mix_seed(seed, 103));
        init_stack(&mut self.decoder, &mut rng);
        if let Some(fc) = &mut self.fc {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::warp::mix_seed(seed, 104));
            let n_in = (fc.h * fc.w * fc.k) as f64;
            let (std1, std2) = match scheme {
                InitScheme::Gaussian => (std, std),
                InitScheme::He => ((2.0 / n_in).sqrt(), (2.0 / fc.d as f64).sqrt()),
            };
            let normal1 = Normal::new(0.0, std1).expect("valid std");
            let normal2 = Normal::new(0.0, std2).expect("valid std");
            for v in fc.w1.iter_mut() {
                *v = T::from_f64_c(normal1.sample(&mut rng));
            }
            for v in fc.w2.iter_mut() {
                *v = T::from_f64_c(normal2.sample(&mut rng));
            }
            for v in fc.b1.iter_mut().chain(fc.b2.iter_mut()) {
                *v = T::zero();
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.shape();
        if h != w || !h.is_power_of_two() || h < 16 {
            return Err(Error::invalid_config(format!(
                "input must be square with power-of-two side >= 16, got {}x{}",
                h, w
            )));
        }
        if h != self.cfg.input_size || c != self.cfg.out_channels {
            return Err(Error::invalid_input(format!(
                "input {}x{}x{} does not match model config {}x{}",
                c, h, w, self.cfg.out_channels, self.cfg.input_size
            )));
        }
        Ok(())
    }

    /// Score maps for one image.
    pub fn detect_scores(&self, x: &Tensor<T>) -> Result<ScoreMaps<T>> {
        self.check_input(x)?;
        ScoreMaps::new(self.detector.forward(x))
    }

    /// Keypoints for one image via the configured soft-argmax variant.
    pub fn detect(&self, x: &Tensor<T>) -> Result<KeypointSet<T>> {
        let scores = self.detect_scores(x)?;
        Ok(if self.cfg.separable {
            crate::bottleneck::softargmax_separable(&scores)
        } else {
            softargmax_full(&scores)
        })
    }

    /// The fc code vector for one image (ablation probes regress from this).
    pub fn detect_code(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let fc = self
            .fc
            .as_ref()
            .ok_or_else(|| Error::invalid_config("model has no fc bottleneck"))?;
        let scores = self.detect_scores(x)?;
        let n = fc.h * fc.w * fc.k;
        let input = scores.tensor().as_slice();
        let mut code = fc.b1.clone();
        gemm_nn(fc.d, n, 1, &fc.w1, input, &mut code);
        for v in code.iter_mut() {
            *v = v.max(T::zero());
        }
        Ok(code)
    }

    pub fn encode_appearance(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.encoder.forward(x))
    }

    pub fn decode(&self, z: &Tensor<T>, y: &GaussianMaps<T>) -> Result<Tensor<T>> {
        if (z.height(), z.width()) != (y.tensor().height(), y.tensor().width()) {
            return Err(Error::invalid_input(format!(
                "decoder inputs disagree spatially: {}x{} vs {}x{}",
                z.height(),
                z.width(),
                y.tensor().height(),
                y.tensor().width()
            )));
        }
        let stacked = Tensor::concat_channels(z, y.tensor())?;
        Ok(self.decoder.forward(&stacked))
    }

    /// Full pipeline: reconstruct the target from source appearance and the
    /// target's bottlenecked geometry. Returns the keypoints for logging.
    pub fn reconstruct(&self, x_src: &Tensor<T>, x_tgt: &Tensor<T>) -> Result<(Tensor<T>, KeypointSet<T>)> {
        let (out, tr) = self.reconstruct_traced(x_src, x_tgt)?;
        Ok((out, tr.keypoints))
    }

    /// Traced forward for training.
    pub fn reconstruct_traced(
        &self,
        x_src: &Tensor<T>,
        x_tgt: &Tensor<T>,
    ) -> Result<(Tensor<T>, ReconTrace<T>)> {
        if x_src.shape() != x_tgt.shape() {
            return Err(Error::invalid_input("source/target shape mismatch"));
        }
        self.check_input(x_src)?;
        let (score_t, det_trace) = self.detector.forward_traced(x_tgt);
        let scores = ScoreMaps::new(score_t)?;

        let (bneck, keypoints) = match (&self.fc, self.cfg.separable) {
            (Some(fc), _) => {
                let (maps, fct) = fc.forward_traced(&scores);
                // keypoints still reported for inspection, not trained through
                let kps = crate::bottleneck::softargmax_separable(&scores);
                (BottleneckTrace::Fc { maps, fct }, kps)
            }
            (None, true) => {
                let (kps, sep) = softargmax_separable_traced(&scores);
                let rendered = render_gaussians(
                    &kps,
                    (self.cfg.heatmap_size, self.cfg.heatmap_size),
                    T::from_f64_c(self.cfg.sigma),
                )?;
                (
                    BottleneckTrace::Separable {
                        sep,
                        rendered,
                        kps: kps.clone(),
                    },
                    kps,
                )
            }
            (None, false) => {
                let kps = softargmax_full(&scores);
                let rendered = render_gaussians(
                    &kps,
                    (self.cfg.heatmap_size, self.cfg.heatmap_size),
                    T::from_f64_c(self.cfg.sigma),
                )?;
                (
                    BottleneckTrace::Full {
                        rendered,
                        kps: kps.clone(),
                    },
                    kps,
                )
            }
        };

        let (z, enc_trace) = self.encoder.forward_traced(x_src);
        let stacked = Tensor::concat_channels(&z, bneck.maps())?;
        let (x_hat, dec_trace) = self.decoder.forward_traced(&stacked);
        Ok((
            x_hat,
            ReconTrace {
                det_trace,
                scores,
                bneck,
                enc_trace,
                z_channels: z.channels(),
                dec_trace,
                keypoints,
            },
        ))
    }

    /// Backprop from d(loss)/d(x_hat) into `grads` (accumulating).
    pub fn reconstruct_backward(
        &self,
        trace: &ReconTrace<T>,
        d_xhat: Tensor<T>,
        grads: &mut ModelGrads<T>,
    ) {
        let d_stacked = self.decoder.backward(
            &trace.dec_trace,
            d_xhat,
            Some(&mut grads.decoder[..]),
        );
        // split into appearance and heatmap gradients
        let (c, h, w) = d_stacked.shape();
        let zc = trace.z_channels;
        let data = d_stacked.as_slice();
        let d_z = Tensor::from_vec(zc, h, w, data[..zc * h * w].to_vec()).expect("split");
        let d_y = Tensor::from_vec(c - zc, h, w, data[zc * h * w..].to_vec()).expect("split");

        self.encoder
            .backward(&trace.enc_trace, d_z, Some(&mut grads.encoder[..]));

        let d_scores = match &trace.bneck {
            BottleneckTrace::Separable { sep, rendered, kps } => {
                let d_pts = render_gaussians_backward(rendered, kps, &d_y);
                crate::bottleneck::softargmax_separable_backward(sep, &d_pts)
            }
            BottleneckTrace::Full { rendered, kps } => {
                let d_pts = render_gaussians_backward(rendered, kps, &d_y);
                softargmax_full_backward(&trace.scores, &d_pts)
            }
            BottleneckTrace::Fc { fct, .. } => {
                let fc = self.fc.as_ref().expect("fc trace implies fc bottleneck");
                let (d_s, fg) = fc.backward(fct, &d_y);
                let g = grads.fc.as_mut().expect("fc grads allocated");
                for (dst, src) in g[0].iter_mut().zip(fg.w1) {
                    *dst += src;
                }
                for (dst, src) in g[1].iter_mut().zip(fg.b1) {
                    *dst += src;
                }
                for (dst, src) in g[2].iter_mut().zip(fg.w2) {
                    *dst += src;
                }
                for (dst, src) in g[3].iter_mut().zip(fg.b2) {
                    *dst += src;
                }
                d_s
            }
        };
        self.detector
            .backward(&trace.det_trace, d_scores, Some(&mut grads.detector[..]));
    }

    /// Named parameter views in canonical order, for checkpointing.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (prefix, stack) in [
            ("detector", &self.detector),
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
        ] {
            for (i, c) in stack.convs().enumerate() {
                out.push((
                    format!("{prefix}.conv{i}.w"),
                    vec![c.out_c, c.in_c, c.k, c.k],
                    c.w.as_slice(),
                ));
                out.push((format!("{prefix}.conv{i}.b"), vec![c.out_c], c.b.as_slice()));
            }
        }
        if let Some(fc) = &self.fc {
            let n = fc.h * fc.w * fc.k;
            out.push(("fc.w1".into(), vec![fc.d, n], fc.w1.as_slice()));
            out.push(("fc.b1".into(), vec![fc.d], fc.b1.as_slice()));
            out.push(("fc.w2".into(), vec![n, fc.d], fc.w2.as_slice()));
            out.push(("fc.b2".into(), vec![n], fc.b2.as_slice()));
        }
        out
    }

    /// Mutable parameter buffers in the same canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for stack in [&mut self.detector, &mut self.encoder, &mut self.decoder] {
            for c in stack.convs_mut() {
                out.push(&mut c.w);
                out.push(&mut c.b);
            }
        }
        if let Some(fc) = &mut self.fc {
            out.push(&mut fc.w1);
            out.push(&mut fc.b1);
            out.push(&mut fc.w2);
            out.push(&mut fc.b2);
        }
        out
    }

    pub fn alloc_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            detector: self.detector.alloc_grads(),
            encoder: self.encoder.alloc_grads(),
            decoder: self.decoder.alloc_grads(),
            fc: self.fc.as_ref().map(|fc| {
                let n = fc.h * fc.w * fc.k;
                vec![
                    vec![T::zero(); fc.d * n],
                    vec![T::zero(); fc.d],
                    vec![T::zero(); n * fc.d],
                    vec![T::zero(); n],
                ]
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, d)| d.len()).sum()
    }
}

/// Cached forward state of one reconstruction, consumed by the backward pass.
pub struct ReconTrace<T> {
    det_trace: Vec<Tensor<T>>,
    scores: ScoreMaps<T>,
    bneck: BottleneckTrace<T>,
    enc_trace: Vec<Tensor<T>>,
    z_channels: usize,
    dec_trace: Vec<Tensor<T>>,
    pub keypoints: KeypointSet<T>,
}

enum BottleneckTrace<T> {
    Separable {
        sep: SeparableTrace<T>,
        rendered: GaussianMaps<T>,
        kps: KeypointSet<T>,
    },
    Full {
        rendered: GaussianMaps<T>,
        kps: KeypointSet<T>,
    },
    Fc {
        maps: Tensor<T>,
        fct: FcTrace<T>,
    },
}

impl<T: Scalar> BottleneckTrace<T> {
    fn maps(&self) -> &Tensor<T> {
        match self {
            BottleneckTrace::Separable { rendered, .. } => rendered.tensor(),
            BottleneckTrace::Full { rendered, .. } => rendered.tensor(),
            BottleneckTrace::Fc { maps, .. } => maps,
        }
    }
}

/// Gradient buffers aligned with the model's canonical parameter order.
pub struct ModelGrads<T> {
    pub detector: Vec<Vec<T>>,
    pub encoder: Vec<Vec<T>>,
    pub decoder: Vec<Vec<T>>,
    pub fc: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Flat view in the same order as `LandmarkModel::params_mut`.
    pub fn slots(&self) -> Vec<&Vec<T>> {
        let mut out: Vec<&Vec<T>> = Vec::new();
        out.extend(self.detector.iter());
        out.extend(self.encoder.iter());
        out.extend(self.decoder.iter());
        if let Some(fc) = &self.fc {
            out.extend(fc.iter());
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        out.extend(self.detector.iter_mut());
        out.extend(self.encoder.iter_mut());
        out.extend(self.decoder.iter_mut());
        if let Some(fc) = &mut self.fc {
            out.extend(fc.iter_mut());
        }
        out
    }

    pub fn zero(&mut self) {
        for slot in self.slots_mut() {
            for v in slot.iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// `self += other`, slot by slot in canonical order.
    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        let other_slots = other.slots();
        for (dst, src) in self.slots_mut().into_iter().zip(other_slots) {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }

    pub fn l2_norm(&self) -> T {
        let mut s = T::zero();
        for slot in self.slots() {
            for &v in slot.iter() {
                s += v * v;
            }
        }
        s.sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for slot in self.slots_mut() {
            for v in slot.iter_mut() {
                *v *= factor;
            }
        }
    }
}
