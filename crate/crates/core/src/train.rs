//! AdamW with warmup-cosine schedule, label-smoothed training, evaluation.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::checkpoint::save_checkpoint;
use crate::autodiff::{backward, grad_check_sampled, no_grad, ops, GradCheckReport, GradientMap, Tensor};
use crate::binfmt::FormatError;
use crate::config::{parse_bool, parse_value, ConfigError, KvConfig};
use crate::data::{crop_resize, flip_label, flip_video, sparse_sample, DataError, DatasetSpec, VideoClip};
use crate::model::{ls_cross_entropy, ModelError, ParamId, ParamStore, TdsModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::autodiff::TensorError> for TrainError {
    fn from(e: crate::autodiff::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_prob: f64,
    pub crop: bool,
    pub crop_min_scale: f64,
    pub jitter: bool,
    /// Reuse frozen-encoder features across epochs when they cannot change.
    pub cache_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            weight_decay: 0.15,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            warmup_epochs: 4,
            batch_size: 16,
            seed: 0,
            flip_prob: 0.5,
            crop: false,
            crop_min_scale: 0.8,
            jitter: false,
            cache_frozen: true,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig { batch_size: 128, seed: 1024, crop: true, jitter: true, ..Self::default() }
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "lr" => self.base_lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "flip_prob" => self.flip_prob = parse_value(key, value)?,
            "crop" => self.crop = parse_bool(key, value)?,
            "crop_min_scale" => self.crop_min_scale = parse_value(key, value)?,
            "jitter" => self.jitter = parse_bool(key, value)?,
            "cache_frozen" => self.cache_frozen = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.base_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("crop", self.crop.to_string()),
            ("crop_min_scale", self.crop_min_scale.to_string()),
            ("jitter", self.jitter.to_string()),
            ("cache_frozen", self.cache_frozen.to_string()),
        ]
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad(format!("lr must be a finite non-negative number, got {}", self.base_lr));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "need warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0) {
            return bad(format!("crop_min_scale must lie in (0, 1], got {}", self.crop_min_scale));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine down to 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One AdamW update over every trainable parameter that has a gradient:
/// `p ← p - lr·wd·p` (where decay applies), then
/// `p ← p - lr·m̂/(√v̂ + eps)` with bias-corrected moments.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut AdamState,
    h: AdamHyper,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let entry = store.entry(id);
        if !entry.tensor.requires_grad() {
            continue;
        }
        let Some(g) = grads.get(entry.tensor.id()) else { continue };
        if g.shape() != entry.tensor.shape() {
            return Err(TrainError::Invalid(format!(
                "gradient for `{}` has shape {:?}, parameter has {:?}",
                entry.name,
                g.shape(),
                entry.tensor.shape()
            )));
        }
        let n = g.numel();
        let (m, v) = state.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let decay = if entry.decay { 1.0 - h.lr * h.weight_decay } else { 1.0 };
        let mut p = entry.tensor.to_vec();
        for (((pi, mi), vi), gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi = *pi * decay - h.lr * mhat / (vhat.sqrt() + h.eps);
        }
        let updated = entry.tensor.with_data(p)?;
        store.set(id, updated);
    }
    Ok(())
}

/// Accuracy summary over a set of clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub count: usize,
}

/// Rank of the true class: number of classes scored above it (earlier
/// index wins ties).
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let z = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

/// Hit counts for top-1 and top-min(5, N_c).
pub fn topk_hits(logits: &[f64], label: usize) -> (bool, bool) {
    let r = label_rank(logits, label);
    (r == 0, r < 5.min(logits.len()))
}

/// Frozen features keyed by clip, flip, and sampled frames.
#[derive(Default)]
pub struct FrozenCache {
    map: HashMap<(usize, bool, Vec<usize>), Vec<Tensor>>,
    bytes: usize,
    limit: usize,
}

impl FrozenCache {
    pub fn with_limit(limit_bytes: usize) -> Self {
        FrozenCache { limit: limit_bytes, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn get_or_compute(
        &mut self,
        model: &TdsModel,
        key: (usize, bool, Vec<usize>),
        video: &Tensor,
    ) -> Result<Vec<Tensor>, TrainError> {
        if let Some(v) = self.map.get(&key) {
            return Ok(v.clone());
        }
        let feats = model.frozen_features(video, &key.2)?;
        let size: usize = feats.iter().map(|t| t.numel() * 8).sum();
        if self.bytes + size <= self.limit {
            self.bytes += size;
            self.map.insert(key, feats.clone());
        }
        Ok(feats)
    }
}

const CACHE_LIMIT: usize = 1 << 30;

/// Score `clips` with segment-centre sampling and no augmentation.
pub fn evaluate(
    model: &TdsModel,
    clips: &[VideoClip],
    mut cache: Option<&mut FrozenCache>,
    cache_offset: usize,
) -> Result<EvalMetrics, TrainError> {
    if clips.is_empty() {
        return Err(TrainError::Invalid("cannot evaluate an empty dataset".into()));
    }
    let _ng = no_grad();
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0);
    for (i, clip) in clips.iter().enumerate() {
        let idx = sparse_sample(clip.frames.shape()[1], model.cfg.frames, None)?;
        let feats = match cache.as_deref_mut() {
            Some(c) if model.frozen_is_pure() => Some(c.get_or_compute(model, (cache_offset + i, false, idx.clone()), &clip.frames)?),
            _ => None,
        };
        let out = model.forward(&clip.frames, &idx, feats.as_deref())?;
        let l = ls_cross_entropy(&out.logits, clip.label, model.cfg.label_smoothing)?;
        loss += l.item()?;
        let (h1, h5) = topk_hits(out.logits.data(), clip.label);
        top1 += usize::from(h1);
        top5 += usize::from(h5);
    }
    let n = clips.len() as f64;
    Ok(EvalMetrics { top1: top1 as f64 / n, top5: top5 as f64 / n, loss: loss / n, count: clips.len() })
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Training-set accuracy after the epoch (no augmentation).
    pub top1: f64,
    pub top5: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub val_loss: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub seconds: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

impl EpochMetrics {
    /// Same record with wall time cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> EpochMetrics {
        EpochMetrics { seconds: 0.0, ..self.clone() }
    }
}

/// Optimize the side network of `model` in place.
pub fn train(
    model: &mut TdsModel,
    tc: &TrainConfig,
    spec: &DatasetSpec,
    train_set: &[VideoClip],
    val_set: &[VideoClip],
    checkpoint: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Invalid("training set is empty".into()));
    }
    tc.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
    if let Some(bad) = train_set.iter().chain(val_set).find(|c| c.label >= model.cfg.num_classes) {
        return Err(TrainError::Invalid(format!(
            "clip `{}` has label {} but the head has {} classes",
            bad.id, bad.label, model.cfg.num_classes
        )));
    }
    let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let warmup_steps = steps_per_epoch * tc.warmup_epochs;
    let use_cache = tc.cache_frozen && !tc.crop && model.frozen_is_pure();
    let mut cache = use_cache.then(|| FrozenCache::with_limit(CACHE_LIMIT));
    let val_offset = train_set.len();
    let mut state = AdamState::new();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_a06e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let clip = &train_set[i];
                let flip = spec.directions >= 2 && aug_rng.gen::<f64>() < tc.flip_prob;
                let mut video = if flip { flip_video(&clip.frames) } else { clip.frames.clone() };
                if tc.crop {
                    let s = aug_rng.gen_range(tc.crop_min_scale..=1.0);
                    let (oy, ox) = (aug_rng.gen::<f64>(), aug_rng.gen::<f64>());
                    video = crop_resize(&video, s, oy, ox);
                }
                let label = if flip { flip_label(clip.label, spec) } else { clip.label };
                let t_raw = video.shape()[1];
                let idx = if tc.jitter {
                    sparse_sample(t_raw, model.cfg.frames, Some(&mut aug_rng))?
                } else {
                    sparse_sample(t_raw, model.cfg.frames, None)?
                };
                let feats = match cache.as_mut() {
                    Some(c) => Some(c.get_or_compute(model, (i, flip, idx.clone()), &video)?),
                    None => None,
                };
                let out = model.forward(&video, &idx, feats.as_deref())?;
                let l = ls_cross_entropy(&out.logits, label, model.cfg.label_smoothing)?;
                total = Some(match total {
                    Some(t) => ops::add(&t, &l)?,
                    None => l,
                });
            }
            let loss = ops::scale(&total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, loss: value });
            }
            loss_sum += value * batch.len() as f64;
            let grads = backward(&loss)?;
            lr = lr_at(step, total_steps, warmup_steps, tc.base_lr);
            let hyper = AdamHyper {
                lr,
                weight_decay: tc.weight_decay,
                beta1: tc.beta1,
                beta2: tc.beta2,
                eps: tc.adam_eps,
            };
            adamw_step(&mut model.store, &grads, &mut state, hyper)?;
            step += 1;
        }
        let train_eval = evaluate(model, train_set, cache.as_mut(), 0)?;
        let val_eval = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set, cache.as_mut(), val_offset)?)
        };
        if let Some(path) = checkpoint {
            save_checkpoint(path, &model.store.to_named_arrays())?;
        }
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / train_set.len() as f64,
            top1: train_eval.top1,
            top5: train_eval.top5,
            val_top1: val_eval.as_ref().map(|e| e.top1),
            val_top5: val_eval.as_ref().map(|e| e.top5),
            val_loss: val_eval.as_ref().map(|e| e.loss),
            lr,
            seconds: started.elapsed().as_secs_f64(),
            trainable_params: model.store.trainable_count(),
            frozen_params: model.store.frozen_count(),
        };
        log::info!(
            "epoch {} loss {:.4} train top1 {:.3} val top1 {}",
            m.epoch,
            m.loss,
            m.top1,
            m.val_top1.map_or("-".into(), |v| format!("{v:.3}"))
        );
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Central-difference check of the loss gradient with respect to every
/// trainable parameter of `model` on one clip, probing at most `per_tensor`
/// random elements of each tensor.
pub fn gradcheck_model(
    model: &TdsModel,
    clip: &VideoClip,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let idx = sparse_sample(clip.frames.shape()[1], model.cfg.frames, None)?;
    let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store[id].requires_grad()).collect();
    let params: Vec<Tensor> = ids.iter().map(|&id| model.store[id].clone()).collect();
    let f = |ps: &[Tensor]| -> crate::autodiff::Result<Tensor> {
        let mut m = model.clone();
        for (&id, p) in ids.iter().zip(ps) {
            m.store.set(id, p.clone());
        }
        let run = || -> Result<Tensor, ModelError> {
            let out = m.forward(&clip.frames, &idx, None)?;
            ls_cross_entropy(&out.logits, clip.label, m.cfg.label_smoothing)
        };
        run().map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => crate::autodiff::TensorError::Attr(other.to_string()),
        })
    };
    Ok(grad_check_sampled(f, &params, eps, per_tensor, seed)?)
}
