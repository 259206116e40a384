//! Reconstruction losses: a perceptual loss over the activations of a fixed
//! conv net with online per-tap balancing, plus plain l1/l2 pixel losses for
//! ablations. All losses honor the boundary discount mask.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nets::{Conv2d, Op, Stack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::DiscountMask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Perceptual,
    L1,
    L2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Seed for the deterministically random loss-net weights.
    pub lossnet_seed: u64,
    /// Optional checkpoint with externally provided loss-net weights.
    pub lossnet_path: Option<PathBuf>,
    /// Channels of the five loss-net stages.
    pub lossnet_channels: Vec<usize>,
    pub balancer_momentum: f64,
    pub balancer_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Perceptual,
            lossnet_seed: 0,
            lossnet_path: None,
            lossnet_channels: vec![8, 12, 16, 16, 16],
            balancer_momentum: 0.99,
            balancer_epsilon: 1e-8,
        }
    }
}

/// Fixed (non-trained) conv net whose activations define the perceptual
/// loss. Five stages of two 3x3 convs; stages 2..5 downsample by 2. Taps are
/// the raw input plus the output of each stage, ordered input -> deep.
#[derive(Clone, Debug)]
pub struct LossNet<T> {
    stages: Vec<Stack<T>>,
    channels: Vec<usize>,
}

pub const LOSSNET_STAGES: usize = 5;

impl<T: Scalar> LossNet<T> {
    fn build(channels: &[usize]) -> Result<Self> {
        if channels.len() != LOSSNET_STAGES {
            return Err(Error::invalid_config(format!(
                "loss net needs {} stage channel counts, got {}",
                LOSSNET_STAGES,
                channels.len()
            )));
        }
        let mut stages = Vec::with_capacity(LOSSNET_STAGES);
        let mut in_c = 3;
        for (s, &c) in channels.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let ops = vec![
                Op::Conv(Conv2d::new(in_c, c, 3, stride)),
                Op::Relu,
                Op::Conv(Conv2d::new(c, c, 3, 1)),
                Op::Relu,
            ];
            stages.push(Stack { ops });
            in_c = c;
        }
        Ok(LossNet {
            stages,
            channels: channels.to_vec(),
        })
    }

    /// Deterministic random weights; the same seed gives bit-identical nets.
    pub fn from_seed(channels: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::build(channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::warp::mix_seed(seed, 201));
        for stage in &mut net.stages {
            stage.init_he(&mut rng);
        }
        Ok(net)
    }

    /// Loads weights from the shared checkpoint container format.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::<T>::load(path)?;
        let channels: Vec<usize> = serde_json::from_value(
            ck.meta
                .get("lossnet_channels")
                .cloned()
                .ok_or_else(|| Error::format("loss-net checkpoint missing lossnet_channels"))?,
        )
        .map_err(|e| Error::format(format!("bad lossnet_channels: {e}")))?;
        let mut net = Self::build(&channels)?;
        for (s, stage) in net.stages.iter_mut().enumerate() {
            for (i, conv) in stage.convs_mut().enumerate() {
                for (suffix, buf, want_len) in [("w", 0usize, 0usize), ("b", 1, 1)] {
                    let _ = (buf, want_len);
                    let name = format!("stage{s}.conv{i}.{suffix}");
                    let (_, data) = ck
                        .get(&name)
                        .ok_or_else(|| Error::format(format!("loss-net checkpoint missing {name}")))?;
                    let dst = if suffix == "w" { &mut conv.w } else { &mut conv.b };
                    if data.len() != dst.len() {
                        return Err(Error::format(format!(
                            "loss-net tensor {name} has length {}, expected {}",
                            data.len(),
                            dst.len()
                        )));
                    }
                    dst.copy_from_slice(data);
                }
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, conv) in stage.convs().enumerate() {
                tensors.push((
                    format!("stage{s}.conv{i}.w"),
                    vec![conv.out_c, conv.in_c, conv.k, conv.k],
                    conv.w.clone(),
                ));
                tensors.push((format!("stage{s}.conv{i}.b"), vec![conv.out_c], conv.b.clone()));
            }
        }
        Checkpoint {
            tensors,
            meta: serde_json::json!({ "lossnet_channels": self.channels }),
        }
        .save(path)
    }

    pub fn tap_count(&self) -> usize {
        self.stages.len() + 1
    }

    /// Activations at every tap, input first.
    pub fn taps(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut out = Vec::with_capacity(self.tap_count());
        out.push(x.clone());
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.forward(&cur);
            out.push(cur.clone());
        }
        out
    }

    fn taps_traced(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, Vec<Vec<Tensor<T>>>) {
        let mut taps = Vec::with_capacity(self.tap_count());
        let mut traces = Vec::with_capacity(self.stages.len());
        taps.push(x.clone());
        let mut cur = x.clone();
        for stage in &self.stages {
            let (next, trace) = stage.forward_traced(&cur);
            traces.push(trace);
            taps.push(next.clone());
            cur = next;
        }
        (taps, traces)
    }

    /// Pulls per-tap gradients back to the input image. The net's own weights
    /// are fixed, so no parameter gradients are produced.
    fn backward_taps(&self, traces: &[Vec<Tensor<T>>], mut d_taps: Vec<Tensor<T>>) -> Tensor<T> {
        let mut g = d_taps.pop().expect("at least the input tap");
        for (stage, trace) in self.stages.iter().zip(traces.iter()).rev() {
            g = stage.backward(trace, g, None);
            let d_prev = d_taps.pop().expect("tap per stage");
            for (a, b) in g.as_mut_slice().iter_mut().zip(d_prev.as_slice()) {
                *a += *b;
            }
        }
        g
    }
}

/// Online per-tap loss balancing: tracks an EMA of each raw tap term and
/// weights taps by the reciprocal, so every tap contributes equally in
/// expectation. Single-writer (the trainer); snapshot-readable.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBalancer<T> {
    means: Vec<T>,
    momentum: T,
    epsilon: T,
    observations: u64,
}

impl<T: Scalar> LayerBalancer<T> {
    pub fn new(taps: usize, momentum: f64, epsilon: f64) -> Self {
        LayerBalancer {
            means: vec![T::zero(); taps],
            momentum: T::from_f64_c(momentum),
            epsilon: T::from_f64_c(epsilon),
            observations: 0,
        }
    }

    pub fn with_means(means: Vec<T>, momentum: f64, epsilon: f64) -> Self {
        LayerBalancer {
            means,
            momentum: T::from_f64_c(momentum),
            epsilon: T::from_f64_c(epsilon),
            observations: 1,
        }
    }

    /// `alpha_l = 1 / (mean_l + eps)`; all ones before the first observation.
    pub fn alphas(&self) -> Vec<T> {
        if self.observations == 0 {
            return vec![T::one(); self.means.len()];
        }
        self.means
            .iter()
            .map(|&m| T::one() / (m + self.epsilon))
            .collect()
    }

    /// Feeds the raw (pre-weighting) tap terms of one training step.
    pub fn observe(&mut self, raw: &[T]) {
        assert_eq!(raw.len(), self.means.len());
        if self.observations == 0 {
            self.means.copy_from_slice(raw);
        } else {
            for (m, &r) in self.means.iter_mut().zip(raw) {
                *m = self.momentum * *m + (T::one() - self.momentum) * r;
            }
        }
        self.observations += 1;
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn restore(means: Vec<T>, momentum: f64, epsilon: f64, observations: u64) -> Self {
        LayerBalancer {
            means,
            momentum: T::from_f64_c(momentum),
            epsilon: T::from_f64_c(epsilon),
            observations,
        }
    }
}

fn mask_tensor<T: Scalar>(mask: &DiscountMask<T>) -> Tensor<T> {
    Tensor::from_vec(1, mask.h, mask.w, mask.weights.clone()).expect("mask shape")
}

/// Average-pools a single-channel map down to `(oh, ow)` (integer factor).
fn avg_pool_to<T: Scalar>(m: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (_, h, w) = m.shape();
    if (h, w) == (oh, ow) {
        return m.clone();
    }
    let fy = h / oh;
    let fx = w / ow;
    debug_assert!(fy * oh == h && fx * ow == w);
    let src = m.channel(0);
    let inv = T::one() / T::from_usize_c(fy * fx);
    let mut out = Tensor::zeros(1, oh, ow);
    let dst = out.channel_mut(0);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = T::zero();
            for dy in 0..fy {
                let row = &src[(oy * fy + dy) * w..];
                for dx in 0..fx {
                    s += row[ox * fx + dx];
                }
            }
            dst[oy * ow + ox] = s * inv;
        }
    }
    out
}

/// Masked mean-squared difference of one tap; the mean is over all elements
/// (count-normalized), so the loss is linear in the mask.
fn masked_sq_term<T: Scalar>(t: &Tensor<T>, h: &Tensor<T>, m: &Tensor<T>) -> T {
    let (c, hh, ww) = t.shape();
    let plane = hh * ww;
    let mw = m.channel(0);
    let mut acc = T::zero();
    for ci in 0..c {
        let tc = t.channel(ci);
        let hc = h.channel(ci);
        for i in 0..plane {
            let d = tc[i] - hc[i];
            acc += mw[i] * d * d;
        }
    }
    acc / T::from_usize_c(c * plane)
}

/// Perceptual loss: sum over taps of `alpha_l * masked MSE of tap features`.
/// The mask is applied at the input resolution and average-pooled to each
/// deeper tap. Balancer state is not modified; the trainer feeds raw terms
/// back via [`LayerBalancer::observe`].
pub fn perceptual_loss<T: Scalar>(
    x_tgt: &Tensor<T>,
    x_hat: &Tensor<T>,
    mask: &DiscountMask<T>,
    net: &LossNet<T>,
    bal: &LayerBalancer<T>,
) -> Result<T> {
    let (loss, _raw) = perceptual_terms(x_tgt, x_hat, mask, net, bal)?;
    Ok(loss)
}

/// Loss plus the raw per-tap terms (pre-balancing), for balancer updates.
pub fn perceptual_terms<T: Scalar>(
    x_tgt: &Tensor<T>,
    x_hat: &Tensor<T>,
    mask: &DiscountMask<T>,
    net: &LossNet<T>,
    bal: &LayerBalancer<T>,
) -> Result<(T, Vec<T>)> {
    check_sizes(x_tgt, x_hat, mask)?;
    let taps_t = net.taps(x_tgt);
    let taps_h = net.taps(x_hat);
    let (loss, raw, _) = perceptual_core(&taps_t, &taps_h, mask, bal, None)?;
    Ok((loss, raw))
}

/// Loss, raw terms, and d(loss)/d(x_hat) in one pass.
pub fn perceptual_loss_with_grad<T: Scalar>(
    x_tgt: &Tensor<T>,
    x_hat: &Tensor<T>,
    mask: &DiscountMask<T>,
    net: &LossNet<T>,
    bal: &LayerBalancer<T>,
) -> Result<(T, Vec<T>, Tensor<T>)> {
    check_sizes(x_tgt, x_hat, mask)?;
    let taps_t = net.taps(x_tgt);
    let (taps_h, traces) = net.taps_traced(x_hat);
    let (loss, raw, d_taps) = perceptual_core(&taps_t, &taps_h, mask, bal, Some(()))?;
    let d_taps = d_taps.expect("gradient requested");
    let dx = net.backward_taps(&traces, d_taps);
    Ok((loss, raw, dx))
}

fn check_sizes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &DiscountMask<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_input("loss images differ in shape"));
    }
    if (a.height(), a.width()) != (mask.h, mask.w) {
        return Err(Error::invalid_input("mask does not match image size"));
    }
    Ok(())
}

fn perceptual_core<T: Scalar>(
    taps_t: &[Tensor<T>],
    taps_h: &[Tensor<T>],
    mask: &DiscountMask<T>,
    bal: &LayerBalancer<T>,
    want_grad: Option<()>,
) -> Result<(T, Vec<T>, Option<Vec<Tensor<T>>>)> {
    let alphas = bal.alphas();
    if alphas.len() != taps_t.len() {
        return Err(Error::numeric(format!(
            "balancer tracks {} taps, loss net has {}",
            alphas.len(),
            taps_t.len()
        )));
    }
    let m0 = mask_tensor(mask);
    let mut loss = T::zero();
    let mut raw = Vec::with_capacity(taps_t.len());
    let mut d_taps = want_grad.map(|_| Vec::with_capacity(taps_t.len()));
    for (l, (t, h)) in taps_t.iter().zip(taps_h.iter()).enumerate() {
        if t.shape() != h.shape() {
            return Err(Error::numeric("tap shape mismatch between images"));
        }
        let ml = avg_pool_to(&m0, t.height(), t.width());
        let term = masked_sq_term(t, h, &ml);
        raw.push(term);
        loss += alphas[l] * term;
        if let Some(dt) = d_taps.as_mut() {
            let (c, hh, ww) = t.shape();
            let denom = T::from_usize_c(c * hh * ww);
            let scale = alphas[l] * T::from_f64_c(2.0) / denom;
            let mw = ml.channel(0).to_vec();
            let mut g = Tensor::zeros(c, hh, ww);
            for ci in 0..c {
                let tc = t.channel(ci);
                let hc = h.channel(ci);
                let gc = g.channel_mut(ci);
                for i in 0..hh * ww {
                    gc[i] = scale * mw[i] * (hc[i] - tc[i]);
                }
            }
            dt.push(g);
        }
    }
    Ok((loss, raw, d_taps))
}

/// Masked mean of `|delta|^p` over pixels and channels (count-normalized,
/// hence exactly linear in the mask).
pub fn pixel_loss<T: Scalar>(
    x_tgt: &Tensor<T>,
    x_hat: &Tensor<T>,
    mask: &DiscountMask<T>,
    p: u8,
) -> Result<T> {
    check_sizes(x_tgt, x_hat, mask)?;
    let (c, h, w) = x_tgt.shape();
    let plane = h * w;
    let mut acc = T::zero();
    for ci in 0..c {
        let tc = x_tgt.channel(ci);
        let hc = x_hat.channel(ci);
        for i in 0..plane {
            let d = (tc[i] - hc[i]).abs();
            let v = match p {
                1 => d,
                2 => d * d,
                _ => return Err(Error::invalid_config("pixel loss order must be 1 or 2")),
            };
            acc += T::from_f64_c(mask.weights[i].to_f64_c()) * v;
        }
    }
    Ok(acc / T::from_usize_c(c * plane))
}

/// Pixel loss plus d(loss)/d(x_hat).
pub fn pixel_loss_with_grad<T: Scalar>(
    x_tgt: &Tensor<T>,
    x_hat: &Tensor<T>,
    mask: &DiscountMask<T>,
    p: u8,
) -> Result<(T, Tensor<T>)> {
    let loss = pixel_loss(x_tgt, x_hat, mask, p)?;
    let (c, h, w) = x_tgt.shape();
    let plane = h * w;
    let denom = T::from_usize_c(c * plane);
    let mut g = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let tc = x_tgt.channel(ci);
        let hc = x_hat.channel(ci);
        let gc = g.channel_mut(ci);
        for i in 0..plane {
            let d = hc[i] - tc[i];
            let dv = match p {
                1 => {
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }
                _ => T::from_f64_c(2.0) * d,
            };
            gc[i] = mask.weights[i] * dv / denom;
        }
    }
    Ok((loss, g))
}
