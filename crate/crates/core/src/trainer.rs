//! Joint optimization of the detector and generator: Adam with L2 weight
//! decay, global gradient-norm clipping, plateau learning-rate drops,
//! checkpointing, and CSV metrics.
//!
//! Training is deterministic: every batch is a pure function of
//! `(seed, step)`, per-sample gradients are reduced in fixed sample order,
//! so runs are bit-identical for any thread count, and resume from a
//! checkpoint continues exactly where an uninterrupted run would be.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::loss::{
    perceptual_loss_with_grad, pixel_loss_with_grad, LayerBalancer, LossConfig, LossKind, LossNet,
};
use crate::nets::{BottleneckConfig, LandmarkModel, ModelConfig, ModelGrads};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::{mix_seed, DiscountMask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps without a new best EMA loss before a x0.1 LR drop.
    pub plateau_patience: usize,
    pub lr_drop_factor: f64,
    pub min_lr: f64,
    /// Momentum of the train-loss EMA driving the plateau schedule.
    pub ema_momentum: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// 1 forces the sequential path; 0 uses all available threads. Results
    /// are bit-identical either way.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            weight_decay: 5e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            max_steps: 20_000,
            plateau_patience: 2000,
            lr_drop_factor: 0.1,
            min_lr: 1e-6,
            ema_momentum: 0.99,
            checkpoint_every: 1000,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::invalid_config("lr and clip_norm must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid_config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid_config("adam betas must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Supplies (source, target, mask) training pairs; must be a pure function
/// of the seed so training stays deterministic and resumable.
pub trait PairSource<T: Scalar>: Sync {
    fn training_pair(&self, seed: u64) -> Result<(Tensor<T>, Tensor<T>, DiscountMask<T>)>;
}

/// Adam moment estimates aligned with the model's canonical parameter order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new_for(model: &LandmarkModel<T>) -> Self {
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, _, d)| d.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One update with classic L2 decay folded into the gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Vec<T>],
        grads: &[&Vec<T>],
        lr: f64,
        weight_decay: f64,
        cfg: &TrainConfig,
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = T::from_f64_c(cfg.beta1);
        let b2 = T::from_f64_c(cfg.beta2);
        let eps = T::from_f64_c(cfg.adam_epsilon);
        let lr = T::from_f64_c(lr);
        let wd = T::from_f64_c(weight_decay);
        let corr1 = T::one() - T::from_f64_c(cfg.beta1.powi(self.t as i32));
        let corr2 = T::one() - T::from_f64_c(cfg.beta2.powi(self.t as i32));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let grad = g[i] + wd * p[i];
                m[i] = b1 * m[i] + (T::one() - b1) * grad;
                v[i] = b2 * v[i] + (T::one() - b2) * grad * grad;
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Mutable training state carried across steps and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: usize,
    pub lr: f64,
    pub best_ema: f64,
    pub ema_loss: f64,
    pub steps_since_best: usize,
    pub adam: Adam<T>,
    pub balancer: LayerBalancer<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &LandmarkModel<T>, cfg: &TrainConfig, loss_cfg: &LossConfig) -> Self {
        TrainState {
            step: 0,
            lr: cfg.lr,
            best_ema: f64::INFINITY,
            ema_loss: f64::NAN,
            steps_since_best: 0,
            adam: Adam::new_for(model),
            balancer: LayerBalancer::new(
                crate::loss::LOSSNET_STAGES + 1,
                loss_cfg.balancer_momentum,
                loss_cfg.balancer_epsilon,
            ),
        }
    }

    /// Plateau schedule: drop LR by the configured factor when the loss EMA
    /// has not improved for `plateau_patience` steps. LR never increases.
    pub fn observe_loss(&mut self, loss: f64, cfg: &TrainConfig) {
        self.ema_loss = if self.ema_loss.is_nan() {
            loss
        } else {
            cfg.ema_momentum * self.ema_loss + (1.0 - cfg.ema_momentum) * loss
        };
        if self.ema_loss < self.best_ema {
            self.best_ema = self.ema_loss;
            self.steps_since_best = 0;
        } else {
            self.steps_since_best += 1;
            if self.steps_since_best >= cfg.plateau_patience && self.lr > cfg.min_lr {
                self.lr = (self.lr * cfg.lr_drop_factor).max(cfg.min_lr);
                self.steps_since_best = 0;
            }
        }
    }
}

/// Rescales all gradients so the global l2 norm is at most `clip_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ModelGrads<T>, clip_norm: f64) -> f64 {
    let norm = grads.l2_norm().to_f64_c();
    if norm > clip_norm && norm > 0.0 {
        grads.scale(T::from_f64_c(clip_norm / norm));
    }
    norm
}

/// Per-step result (values are f64 regardless of the model scalar).
#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub raw_taps: Vec<f64>,
}

/// One optimizer step over an explicit batch.
pub fn train_step<T: Scalar>(
    model: &mut LandmarkModel<T>,
    lossnet: &LossNet<T>,
    batch: &[(Tensor<T>, Tensor<T>, DiscountMask<T>)],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<StepStats> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid_input("empty batch"));
    }
    let inv_n = T::from_f64_c(1.0 / n as f64);
    let balancer = state.balancer.clone();
    let model_ref: &LandmarkModel<T> = model;

    let per_sample = |(src, tgt, mask): &(Tensor<T>, Tensor<T>, DiscountMask<T>)| -> Result<(f64, Vec<f64>, ModelGrads<T>)> {
        let (x_hat, trace) = model_ref.reconstruct_traced(src, tgt)?;
        let (loss, raws, mut d_xhat) = match loss_cfg.kind {
            LossKind::Perceptual => {
                let (l, r, g) = perceptual_loss_with_grad(tgt, &x_hat, mask, lossnet, &balancer)?;
                (l, r.iter().map(|v| v.to_f64_c()).collect::<Vec<f64>>(), g)
            }
            LossKind::L1 => {
                let (l, g) = pixel_loss_with_grad(tgt, &x_hat, mask, 1)?;
                (l, Vec::new(), g)
            }
            LossKind::L2 => {
                let (l, g) = pixel_loss_with_grad(tgt, &x_hat, mask, 2)?;
                (l, Vec::new(), g)
            }
        };
        d_xhat.scale_inplace(inv_n);
        let mut grads = model_ref.alloc_grads();
        model_ref.reconstruct_backward(&trace, d_xhat, &mut grads);
        Ok((loss.to_f64_c(), raws, grads))
    };

    let results: Vec<Result<(f64, Vec<f64>, ModelGrads<T>)>> = if cfg.threads == 1 {
        batch.iter().map(per_sample).collect()
    } else {
        batch.par_iter().map(per_sample).collect()
    };
    let mut samples = Vec::with_capacity(n);
    for r in results {
        samples.push(r?);
    }

    // fixed-order reductions keep results identical for any thread count
    let loss = samples.iter().map(|(l, _, _)| *l).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss at step {}", state.step)));
    }
    let raw_taps: Vec<f64> = if matches!(loss_cfg.kind, LossKind::Perceptual) {
        let taps = samples[0].1.len();
        (0..taps)
            .map(|t| samples.iter().map(|(_, r, _)| r[t]).sum::<f64>() / n as f64)
            .collect()
    } else {
        Vec::new()
    };

    let mut total = model.alloc_grads();
    {
        let mut total_slots = total.slots_mut();
        let sample_grads: Vec<Vec<&Vec<T>>> = samples.iter().map(|(_, _, g)| g.slots()).collect();
        let reduce_slot = |(slot_idx, dst): (usize, &mut &mut Vec<T>)| {
            for sg in &sample_grads {
                let src = sg[slot_idx];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += s;
                }
            }
        };
        if cfg.threads == 1 {
            total_slots.iter_mut().enumerate().for_each(reduce_slot);
        } else {
            total_slots.par_iter_mut().enumerate().for_each(reduce_slot);
        }
    }

    let grad_norm = clip_grad_norm(&mut total, cfg.clip_norm);
    {
        let mut params = model.params_mut();
        let grad_slots = total.slots();
        state
            .adam
            .step(&mut params, &grad_slots, state.lr, cfg.weight_decay, cfg);
    }
    if matches!(loss_cfg.kind, LossKind::Perceptual) {
        let raws_t: Vec<T> = raw_taps.iter().map(|&v| T::from_f64_c(v)).collect();
        state.balancer.observe(&raws_t);
    }
    state.observe_loss(loss, cfg);
    state.step += 1;

    Ok(StepStats {
        loss,
        grad_norm,
        raw_taps,
    })
}

/// Builds the deterministic batch for a step.
pub fn batch_for_step<T: Scalar>(
    source: &dyn PairSource<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<(Tensor<T>, Tensor<T>, DiscountMask<T>)>> {
    let base = mix_seed(cfg.seed, 0xBA7C_0000 + step as u64);
    let seeds: Vec<u64> = (0..cfg.batch_size)
        .map(|j| mix_seed(base, j as u64))
        .collect();
    let pairs: Vec<Result<_>> = if cfg.threads == 1 {
        seeds.iter().map(|&s| source.training_pair(s)).collect()
    } else {
        seeds.par_iter().map(|&s| source.training_pair(s)).collect()
    };
    pairs.into_iter().collect()
}

/// Runs training to `max_steps`, with periodic checkpoints and CSV metrics
/// when `run_dir` is given. Stops early (after flushing a checkpoint) when
/// `stop` becomes true. Resumable: pass a state restored by
/// [`load_train_checkpoint`].
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Scalar>(
    model: &mut LandmarkModel<T>,
    lossnet: &LossNet<T>,
    source: &dyn PairSource<T>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    state: &mut TrainState<T>,
    run_dir: Option<&Path>,
    stop: Option<&AtomicBool>,
) -> Result<()> {
    cfg.validate()?;
    let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut metrics = match run_dir {
        Some(d) => {
            let path = d.join("metrics.csv");
            let fresh = !path.exists() || state.step == 0;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)?;
            if fresh {
                let raw_cols: String = (0..crate::loss::LOSSNET_STAGES + 1)
                    .map(|i| format!(",raw_tap{i}"))
                    .collect();
                writeln!(f, "step,loss,lr,grad_norm{raw_cols}")?;
            }
            Some(f)
        }
        None => None,
    };

    while state.step < cfg.max_steps {
        if let Some(flag) = stop {
            if flag.load(Ordering::Relaxed) {
                log::info!("stop requested; flushing checkpoint at step {}", state.step);
                break;
            }
        }
        let batch = batch_for_step(source, cfg, state.step)?;
        let step_before = state.step;
        let stats = match train_step(model, lossnet, &batch, state, cfg, loss_cfg) {
            Ok(s) => s,
            Err(Error::Numeric(msg)) => {
                if let Some(d) = run_dir {
                    dump_diagnostics(d, model, state, &batch)?;
                }
                return Err(Error::Numeric(format!("{msg}; diagnostics dumped")));
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = metrics.as_mut() {
            let mut line = format!(
                "{},{:.8e},{:.3e},{:.6e}",
                step_before, stats.loss, state.lr, stats.grad_norm
            );
            for r in &stats.raw_taps {
                line.push_str(&format!(",{r:.8e}"));
            }
            writeln!(f, "{line}")?;
        }
        if let Some(d) = &ckpt_dir {
            if state.step % cfg.checkpoint_every == 0 || state.step == cfg.max_steps {
                save_train_checkpoint(&d.join("latest.ckpt"), model, state, cfg, loss_cfg)?;
            }
        }
    }
    if let Some(d) = &ckpt_dir {
        save_train_checkpoint(&d.join("latest.ckpt"), model, state, cfg, loss_cfg)?;
        save_train_checkpoint(&d.join("final.ckpt"), model, state, cfg, loss_cfg)?;
    }
    if let Some(f) = metrics.as_mut() {
        f.flush()?;
    }
    Ok(())
}

fn dump_diagnostics<T: Scalar>(
    run_dir: &Path,
    model: &LandmarkModel<T>,
    state: &TrainState<T>,
    batch: &[(Tensor<T>, Tensor<T>, DiscountMask<T>)],
) -> Result<()> {
    let dir = run_dir.join("diagnostics");
    std::fs::create_dir_all(&dir)?;
    let mut tensors = Vec::new();
    for (i, (src, tgt, mask)) in batch.iter().enumerate() {
        let (c, h, w) = src.shape();
        tensors.push((format!("batch{i}.source"), vec![c, h, w], src.as_slice().to_vec()));
        tensors.push((format!("batch{i}.target"), vec![c, h, w], tgt.as_slice().to_vec()));
        tensors.push((format!("batch{i}.mask"), vec![mask.h, mask.w], mask.weights.clone()));
    }
    Checkpoint {
        tensors,
        meta: serde_json::json!({"step": state.step, "reason": "non-finite loss"}),
    }
    .save(&dir.join("failing_batch.ckpt"))?;
    save_model_checkpoint(&dir.join("model_at_failure.ckpt"), model, serde_json::Value::Null)?;
    Ok(())
}

/// Saves only the model (for eval-time artifacts).
pub fn save_model_checkpoint<T: Scalar>(
    path: &Path,
    model: &LandmarkModel<T>,
    extra_meta: serde_json::Value,
) -> Result<()> {
    let tensors = model
        .named_params()
        .into_iter()
        .map(|(n, s, d)| (n, s, d.to_vec()))
        .collect();
    let meta = serde_json::json!({
        "model_config": model.cfg,
        "bottleneck_config": model.bottleneck,
        "extra": extra_meta,
    });
    Checkpoint { tensors, meta }.save(path)
}

/// Full training checkpoint: model, optimizer moments, balancer, schedule.
pub fn save_train_checkpoint<T: Scalar>(
    path: &Path,
    model: &LandmarkModel<T>,
    state: &TrainState<T>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<()> {
    let named = model.named_params();
    let mut tensors: Vec<(String, Vec<usize>, Vec<T>)> = named
        .iter()
        .map(|(n, s, d)| (n.clone(), s.clone(), d.to_vec()))
        .collect();
    for ((name, shape, _), (m, v)) in named.iter().zip(state.adam.m.iter().zip(&state.adam.v)) {
        tensors.push((format!("adam.m.{name}"), shape.clone(), m.clone()));
        tensors.push((format!("adam.v.{name}"), shape.clone(), v.clone()));
    }
    tensors.push((
        "balancer.means".into(),
        vec![state.balancer.means().len()],
        state.balancer.means().to_vec(),
    ));
    let meta = serde_json::json!({
        "step": state.step,
        "lr": state.lr,
        "best_ema": if state.best_ema.is_finite() { serde_json::json!(state.best_ema) } else { serde_json::Value::Null },
        "ema_loss": if state.ema_loss.is_nan() { serde_json::Value::Null } else { serde_json::json!(state.ema_loss) },
        "steps_since_best": state.steps_since_best,
        "adam_t": state.adam.t,
        "balancer_observations": state.balancer.observations(),
        "model_config": model.cfg,
        "bottleneck_config": model.bottleneck,
        "train_config": cfg,
        "loss_config": loss_cfg,
    });
    Checkpoint { tensors, meta }.save(path)
}

fn fill_params<T: Scalar>(model: &mut LandmarkModel<T>, ck: &Checkpoint<T>) -> Result<()> {
    let names: Vec<(String, usize)> = model
        .named_params()
        .iter()
        .map(|(n, _, d)| (n.clone(), d.len()))
        .collect();
    let mut bufs = model.params_mut();
    for ((name, want_len), buf) in names.iter().zip(bufs.iter_mut()) {
        let (_, data) = ck
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))?;
        if data.len() != *want_len {
            return Err(Error::format(format!(
                "checkpoint tensor {name} has {} values, model expects {want_len}",
                data.len()
            )));
        }
        buf.copy_from_slice(data);
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint (training or model-only).
pub fn load_model<T: Scalar>(path: &Path) -> Result<LandmarkModel<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    let model_cfg: ModelConfig = serde_json::from_value(
        ck.meta
            .get("model_config")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint missing model_config"))?,
    )?;
    let bneck_cfg: BottleneckConfig = serde_json::from_value(
        ck.meta
            .get("bottleneck_config")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint missing bottleneck_config"))?,
    )?;
    let mut model = LandmarkModel::new(&model_cfg, &bneck_cfg, 0)?;
    fill_params(&mut model, &ck)?;
    Ok(model)
}

/// Restores the full training state saved by [`save_train_checkpoint`].
pub fn load_train_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(LandmarkModel<T>, TrainState<T>, TrainConfig, LossConfig)> {
    let ck = Checkpoint::<T>::load(path)?;
    let mut model = load_model::<T>(path)?;
    fill_params(&mut model, &ck)?;
    let cfg: TrainConfig = serde_json::from_value(
        ck.meta
            .get("train_config")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint missing train_config"))?,
    )?;
    let loss_cfg: LossConfig = serde_json::from_value(
        ck.meta
            .get("loss_config")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint missing loss_config"))?,
    )?;
    let mut adam = Adam::new_for(&model);
    for (i, (name, _, _)) in model.named_params().iter().enumerate() {
        let (_, m) = ck
            .get(&format!("adam.m.{name}"))
            .ok_or_else(|| Error::format(format!("checkpoint missing adam.m.{name}")))?;
        let (_, v) = ck
            .get(&format!("adam.v.{name}"))
            .ok_or_else(|| Error::format(format!("checkpoint missing adam.v.{name}")))?;
        adam.m[i].copy_from_slice(m);
        adam.v[i].copy_from_slice(v);
    }
    adam.t = ck.meta["adam_t"].as_u64().unwrap_or(0);
    let (_, means) = ck
        .get("balancer.means")
        .ok_or_else(|| Error::format("checkpoint missing balancer.means"))?;
    let balancer = LayerBalancer::restore(
        means.to_vec(),
        loss_cfg.balancer_momentum,
        loss_cfg.balancer_epsilon,
        ck.meta["balancer_observations"].as_u64().unwrap_or(0),
    );
    let state = TrainState {
        step: ck.meta["step"].as_u64().unwrap_or(0) as usize,
        lr: ck.meta["lr"].as_f64().unwrap_or(cfg.lr),
        best_ema: ck.meta["best_ema"].as_f64().unwrap_or(f64::INFINITY),
        ema_loss: ck.meta["ema_loss"].as_f64().unwrap_or(f64::NAN),
        steps_since_best: ck.meta["steps_since_best"].as_u64().unwrap_or(0) as usize,
        adam,
        balancer,
    };
    Ok((model, state, cfg, loss_cfg))
}

/// A fixed pair repeated forever; used by overfit smoke tests.
pub struct FixedPair<T: Scalar> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub mask: DiscountMask<T>,
}

impl<T: Scalar> PairSource<T> for FixedPair<T> {
    fn training_pair(&self, _seed: u64) -> Result<(Tensor<T>, Tensor<T>, DiscountMask<T>)> {
        Ok((self.source.clone(), self.target.clone(), self.mask.clone()))
    }
}

/// Convenience used by the CLI: path of the freshest checkpoint in a run.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let p = run_dir.join("checkpoints").join("latest.ckpt");
    p.exists().then_some(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::BottleneckConfig;

    fn tiny_model(seed: u64) -> LandmarkModel<f32> {
        let cfg = ModelConfig {
            input_size: 32,
            k: 3,
            base_channels: 4,
            decoder_start_channels: 16,
            decoder_min_channels: 8,
            ..ModelConfig::default()
        };
        LandmarkModel::new(&cfg, &BottleneckConfig::default(), seed).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 1,
            max_steps: 100,
            threads: 1,
            checkpoint_every: 50,
            ..TrainConfig::default()
        }
    }

    fn tiny_pair() -> FixedPair<f32> {
        let src = Tensor::from_fn(3, 32, 32, |c, y, x| {
            0.5 + 0.4 * (((c + 1) as f32 * 0.7 + y as f32 * 0.21 + x as f32 * 0.13).sin())
        });
        let tgt = Tensor::from_fn(3, 32, 32, |c, y, x| {
            0.5 + 0.4 * (((c + 1) as f32 * 0.9 + y as f32 * 0.17 + x as f32 * 0.19).cos())
        });
        FixedPair {
            source: src,
            target: tgt.clone(),
            mask: DiscountMask::ones(32, 32),
        }
    }

    #[test]
    fn clipping_contract() {
        let model = tiny_model(1);
        let mut grads = model.alloc_grads();
        // fill with a vector of known norm 5
        let total: usize = grads.slots().iter().map(|s| s.len()).sum();
        let val = 5.0f32 / (total as f32).sqrt();
        for slot in grads.slots_mut() {
            for v in slot.iter_mut() {
                *v = val;
            }
        }
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-3);
        let after = grads.l2_norm();
        assert!((after - 1.0).abs() < 1e-3, "clipped norm {after}");

        // small gradients pass through unscaled
        let mut grads = model.alloc_grads();
        let val = 0.5f32 / (total as f32).sqrt();
        for slot in grads.slots_mut() {
            for v in slot.iter_mut() {
                *v = val;
            }
        }
        let before: Vec<f32> = grads.slots().iter().flat_map(|s| s.iter().copied()).collect();
        clip_grad_norm(&mut grads, 1.0);
        let after: Vec<f32> = grads.slots().iter().flat_map(|s| s.iter().copied()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn plateau_schedule_drops_lr_by_factor() {
        let model = tiny_model(2);
        let cfg = TrainConfig {
            plateau_patience: 10,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&model, &cfg, &LossConfig::default());
        state.observe_loss(1.0, &cfg); // initializes EMA and best
        for _ in 0..9 {
            state.observe_loss(1.0, &cfg);
            assert!((state.lr - 1e-2).abs() < 1e-15);
        }
        state.observe_loss(1.0, &cfg); // 10th non-improving step triggers the drop
        assert!((state.lr - 1e-3).abs() < 1e-15);
        // lr never increases and drops multiply by the factor
        for _ in 0..10 {
            state.observe_loss(1.0, &cfg);
        }
        assert!((state.lr - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn overfit_single_pair_l2() {
        let mut model = tiny_model(3);
        let lossnet = LossNet::from_seed(&[4, 6, 8, 8, 8], 0).unwrap();
        let pair = tiny_pair();
        let cfg = tiny_cfg();
        let loss_cfg = LossConfig {
            kind: LossKind::L2,
            ..LossConfig::default()
        };
        let mut state = TrainState::new(&model, &cfg, &loss_cfg);
        let batch = vec![(pair.source.clone(), pair.target.clone(), pair.mask.clone())];
        let first = train_step(&mut model, &lossnet, &batch, &mut state, &cfg, &loss_cfg)
            .unwrap()
            .loss;
        let mut last = first;
        for _ in 1..100 {
            last = train_step(&mut model, &lossnet, &batch, &mut state, &cfg, &loss_cfg)
                .unwrap()
                .loss;
        }
        assert!(
            last <= first / 10.0,
            "expected 10x improvement: first {first}, last {last}"
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(4);
        let lossnet = LossNet::from_seed(&[4, 6, 8, 8, 8], 0).unwrap();
        let mut pair = tiny_pair();
        pair.target.as_mut_slice()[17] = f32::NAN;
        let cfg = TrainConfig {
            max_steps: 1,
            ..tiny_cfg()
        };
        let loss_cfg = LossConfig {
            kind: LossKind::L2,
            ..LossConfig::default()
        };
        let mut state = TrainState::new(&model, &cfg, &loss_cfg);
        let err = fit(
            &mut model,
            &lossnet,
            &pair,
            &cfg,
            &loss_cfg,
            &mut state,
            Some(dir.path()),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(dir.path().join("diagnostics/failing_batch.ckpt").exists());
        assert!(dir.path().join("diagnostics/model_at_failure.ckpt").exists());
    }

    #[test]
    fn training_checkpoint_round_trip_resume() {
        let dir = tempfile::tempdir().unwrap();
        let lossnet = LossNet::from_seed(&[4, 6, 8, 8, 8], 0).unwrap();
        let pair = tiny_pair();
        let loss_cfg = LossConfig::default();

        // straight run: 12 steps
        let cfg_full = TrainConfig {
            max_steps: 12,
            batch_size: 2,
            ..tiny_cfg()
        };
        let mut m_full = tiny_model(7);
        let mut s_full = TrainState::new(&m_full, &cfg_full, &loss_cfg);
        fit(&mut m_full, &lossnet, &pair, &cfg_full, &loss_cfg, &mut s_full, None, None).unwrap();

        // interrupted run: 6 steps, checkpoint, resume to 12
        let cfg_half = TrainConfig {
            max_steps: 6,
            batch_size: 2,
            ..tiny_cfg()
        };
        let mut m_half = tiny_model(7);
        let mut s_half = TrainState::new(&m_half, &cfg_half, &loss_cfg);
        fit(&mut m_half, &lossnet, &pair, &cfg_half, &loss_cfg, &mut s_half, None, None).unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        save_train_checkpoint(&ckpt, &m_half, &s_half, &cfg_half, &loss_cfg).unwrap();

        let (mut m_res, mut s_res, _, _) = load_train_checkpoint::<f32>(&ckpt).unwrap();
        assert_eq!(s_res.step, 6);
        fit(&mut m_res, &lossnet, &pair, &cfg_full, &loss_cfg, &mut s_res, None, None).unwrap();

        for ((_, _, a), (_, _, b)) in m_full
            .named_params()
            .iter()
            .zip(m_res.named_params().iter())
        {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "resume diverged from straight run");
            }
        }
    }
}
