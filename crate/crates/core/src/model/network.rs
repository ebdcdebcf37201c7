//! Frozen encoder plus temporal side network, end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adapters::{
    motion_features, shift_class_tokens, sme_forward, td_forward, temporal_conv_forward, SmeParams, TdParams,
    TemporalConvParams,
};
use super::config::{SmeMode, TdFallback};
use super::params::{Init, ParamId, ParamStore};
use super::vit::{frozen_forward_with, vit_block_forward, FrozenEncoder, Linear, TokenEmbedding, VitBlockParams, INIT_STD, LN_EPS};
use super::{ModelConfig, ModelError, Result};
use crate::autodiff::ops::{self, PadMode};
use crate::autodiff::{branch_scope, no_grad, Branch, Tensor};
use crate::config::KvConfig;
use crate::data::sparse_sample;

#[derive(Clone, Debug)]
pub struct SideLayer {
    pub fuse: Linear,
    pub td: Option<TdParams>,
    pub fallback: Option<TemporalConvParams>,
    pub block: VitBlockParams,
}

#[derive(Clone, Debug)]
pub struct TdsModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub frozen: FrozenEncoder,
    pub appearance: TokenEmbedding,
    /// Motion convolution feeding the side stream.
    pub sme: Option<SmeParams>,
    /// Motion convolution feeding the frozen encoder input.
    pub sme_frozen: Option<SmeParams>,
    pub layers: Vec<SideLayer>,
    pub head_ln_g: ParamId,
    pub head_ln_b: ParamId,
    pub head: Linear,
    pub motion_head: Option<Linear>,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Side tokens `[T×(1+N)×C_s]` after each side block.
    pub side_tokens: Vec<Tensor>,
    /// Side input before the first layer.
    pub side_input: Tensor,
}

impl TdsModel {
    /// Frozen weights come from `cfg.frozen_seed`, side weights from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, ParamStore::new(), seed)
    }

    /// Shape-only model for graph census at any scale.
    pub fn new_meta(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, ParamStore::meta(), 0)
    }

    fn build(cfg: &ModelConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        cfg.validate().map_err(|e| ModelError::Invalid(e.to_string()))?;
        let tokens = cfg.tokens();
        let mut frng = ChaCha8Rng::seed_from_u64(cfg.frozen_seed);
        let frozen = FrozenEncoder::new(
            &mut store,
            cfg.patch,
            tokens,
            cfg.frozen_dim,
            cfg.frozen_heads,
            cfg.layers,
            cfg.mlp_ratio,
            &mut frng,
        )?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.side_dim;
        let appearance = TokenEmbedding::new(&mut store, "side", cfg.patch, tokens, c, true, rng);
        let motion = cfg.motion_enabled();
        let sme = (motion && cfg.sme_mode != SmeMode::Spatial)
            .then(|| SmeParams::new(&mut store, "sme.conv", cfg.window_radius, cfg.patch, c, cfg.alpha, cfg.beta, rng))
            .transpose()?;
        let sme_frozen = (motion && cfg.sme_mode.feeds_frozen())
            .then(|| {
                SmeParams::new(
                    &mut store,
                    "sme.frozen_conv",
                    cfg.window_radius,
                    cfg.patch,
                    cfg.frozen_dim,
                    cfg.alpha,
                    cfg.beta,
                    rng,
                )
            })
            .transpose()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("side.layer{l}");
            let fuse = Linear::new(&mut store, &format!("{p}.fuse"), cfg.frozen_dim, c, true, INIT_STD, true, rng);
            let (td, fallback) = if cfg.td_layers[l] {
                let td = TdParams::new(&mut store, &format!("{p}.td"), c, cfg.reduction, cfg.pool_kernel, cfg.td_variant, rng)?;
                (Some(td), None)
            } else if cfg.td_fallback == TdFallback::Conv3d {
                (None, Some(TemporalConvParams::new(&mut store, &format!("{p}.tconv"), c, rng)))
            } else {
                (None, None)
            };
            let block = VitBlockParams::new(&mut store, &format!("{p}.block"), c, cfg.side_heads, cfg.mlp_ratio, INIT_STD, true, rng)?;
            layers.push(SideLayer { fuse, td, fallback, block });
        }
        let head_ln_g = store.add("head.ln.g", &[c], Init::Ones, true, rng);
        let head_ln_b = store.add("head.ln.b", &[c], Init::Zeros, true, rng);
        let head = Linear::new(&mut store, "head.proj", c, cfg.num_classes, true, INIT_STD, true, rng);
        let motion_head = (motion && cfg.sme_mode == SmeMode::Additional)
            .then(|| Linear::new(&mut store, "head.motion", c, cfg.num_classes, true, INIT_STD, true, rng));
        Ok(TdsModel {
            cfg: cfg.clone(),
            store,
            frozen,
            appearance,
            sme,
            sme_frozen,
            layers,
            head_ln_g,
            head_ln_b,
            head,
            motion_head,
        })
    }

    /// Whether frozen features depend only on the sampled frames (and can
    /// therefore be computed once and reused).
    pub fn frozen_is_pure(&self) -> bool {
        self.sme_frozen.is_none() && !self.backbone_trainable()
    }

    /// True when some encoder weight has been unfrozen.
    pub fn backbone_trainable(&self) -> bool {
        self.store.entries().iter().any(|e| e.name.starts_with("frozen.") && e.tensor.requires_grad())
    }

    /// Frozen features of the sampled frames, outside any graph.
    pub fn frozen_features(&self, video: &Tensor, indices: &[usize]) -> Result<Vec<Tensor>> {
        if !self.frozen_is_pure() {
            return Err(ModelError::Invalid("frozen features depend on trainable motion weights".into()));
        }
        let _ng = no_grad();
        let frames = ops::index_select(video, 1, indices)?;
        frozen_forward_with(&frames, &self.frozen, &self.store, None, None)
    }

    /// Forward pass over the sampled frame `indices` of a `[3×T_raw×H×W]`
    /// clip. `cached` may hold precomputed [`TdsModel::frozen_features`].
    pub fn forward(&self, video: &Tensor, indices: &[usize], cached: Option<&[Tensor]>) -> Result<ForwardOutput> {
        self.forward_impl(video, indices, cached, None)
    }

    /// [`TdsModel::forward`] with `hook(l, tokens)` applied to the input of
    /// every encoder block. Whatever the hook adds is trained through the
    /// encoder, so fusion inputs are not detached.
    pub fn forward_hooked(&self, video: &Tensor, indices: &[usize], hook: &dyn Fn(usize, &Tensor) -> Result<Tensor>) -> Result<ForwardOutput> {
        self.forward_impl(video, indices, None, Some(hook))
    }

    fn forward_impl(
        &self,
        video: &Tensor,
        indices: &[usize],
        cached: Option<&[Tensor]>,
        hook: Option<&dyn Fn(usize, &Tensor) -> Result<Tensor>>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let store = &self.store;
        if indices.len() != cfg.frames {
            return Err(ModelError::Invalid(format!("expected {} sampled frames, got {}", cfg.frames, indices.len())));
        }
        let s = video.shape();
        if s.len() != 4 || s[0] != 3 || s[2] != cfg.height || s[3] != cfg.width {
            return Err(ModelError::Invalid(format!(
                "video {s:?} does not match [3×T×{}×{}]",
                cfg.height, cfg.width
            )));
        }
        let grid = cfg.grid();
        let frozen_feats = match (cached, &self.sme_frozen) {
            (Some(c), None) if hook.is_none() => c.to_vec(),
            (_, sme_f) => {
                let frames = ops::index_select(video, 1, indices)?;
                let offset = match sme_f {
                    Some(p) => {
                        let _scope = branch_scope(Branch::Adapter);
                        let m = motion_features(video, indices, p, store)?;
                        Some(ops::scale(&ops::pad(&m, 1, 1, 0, PadMode::Zero)?, p.alpha)?)
                    }
                    None => None,
                };
                frozen_forward_with(&frames, &self.frozen, store, offset.as_ref(), hook)?
            }
        };
        if frozen_feats.len() != cfg.layers {
            return Err(ModelError::Invalid(format!(
                "got {} frozen feature maps for {} layers",
                frozen_feats.len(),
                cfg.layers
            )));
        }
        let detach = self.sme_frozen.is_none() && hook.is_none() && !self.backbone_trainable();

        let _side = branch_scope(Branch::Side);
        let (mut x, motion) = match &self.sme {
            Some(p) if cfg.sme_mode.feeds_side_input() => (sme_forward(video, indices, p, store, &self.appearance)?, None),
            Some(p) => {
                let frames = ops::index_select(video, 1, indices)?;
                let a = self.appearance.forward(store, &frames)?;
                let _scope = branch_scope(Branch::Adapter);
                (a, Some(motion_features(video, indices, p, store)?))
            }
            None => {
                let frames = ops::index_select(video, 1, indices)?;
                (self.appearance.forward(store, &frames)?, None)
            }
        };
        let side_input = x.clone();
        let mut side_tokens = Vec::with_capacity(cfg.layers);
        for (l, layer) in self.layers.iter().enumerate() {
            if l == 1 && cfg.sme_mode == SmeMode::Cross {
                if let (Some(m), Some(p)) = (&motion, &self.sme) {
                    let _scope = branch_scope(Branch::Adapter);
                    let m = ops::scale(&ops::pad(m, 1, 1, 0, PadMode::Zero)?, p.alpha)?;
                    x = ops::add(&x, &m)?;
                }
            }
            if cfg.cls_shift && cfg.shift_before_fuse {
                x = shift_class_tokens(&x, cfg.shift_div)?;
            }
            x = fuse_frozen(&x, &frozen_feats[l], &layer.fuse, store, detach)?;
            if cfg.cls_shift && !cfg.shift_before_fuse {
                x = shift_class_tokens(&x, cfg.shift_div)?;
            }
            {
                let _scope = branch_scope(Branch::Adapter);
                if let Some(td) = &layer.td {
                    x = td_forward(&x, td, store, grid)?;
                } else if let Some(tc) = &layer.fallback {
                    x = temporal_conv_forward(&x, tc, store, grid)?;
                }
            }
            x = vit_block_forward(&x, &layer.block, store)?;
            side_tokens.push(x.clone());
        }
        let mut logits = self.head_logits(&x)?;
        if let (Some(m), Some(head)) = (&motion, &self.motion_head) {
            let (t, n, c) = (m.shape()[0], m.shape()[1], m.shape()[2]);
            let extra = head.forward(store, &ops::reshape(m, &[t * n, c])?)?;
            logits = ops::add(&logits, &ops::mean_axis(&extra, 0)?)?;
        }
        Ok(ForwardOutput { logits, side_tokens, side_input })
    }

    /// `GAP(Proj(LN(patch tokens)))` over frames and patches; the class
    /// token is not pooled.
    fn head_logits(&self, x: &Tensor) -> Result<Tensor> {
        let (t, s, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let patches = ops::reshape(&ops::narrow(x, 1, 1, s - 1)?, &[t * (s - 1), c])?;
        let h = ops::layer_norm(&patches, Some(&self.store[self.head_ln_g]), Some(&self.store[self.head_ln_b]), LN_EPS)?;
        let per_token = self.head.forward(&self.store, &h)?;
        Ok(ops::mean_axis(&per_token, 0)?)
    }
}

/// `side + frozen·W + b`, token-wise. With `detach` the frozen features
/// enter as constants so no gradient path leads back into the encoder.
pub fn fuse_frozen(side: &Tensor, frozen: &Tensor, proj: &Linear, store: &ParamStore, detach: bool) -> Result<Tensor> {
    let (ss, fs) = (side.shape(), frozen.shape());
    if ss.len() != 3 || fs.len() != 3 || ss[..2] != fs[..2] {
        return Err(ModelError::Invalid(format!("cannot fuse frozen tokens {fs:?} into side tokens {ss:?}")));
    }
    let (t, n, cf) = (fs[0], fs[1], fs[2]);
    let z = {
        let _scope = branch_scope(Branch::Frozen);
        ops::reshape(frozen, &[t * n, cf])?
    };
    let z = if detach { z.detach() } else { z };
    let p = proj.forward(store, &z)?;
    Ok(ops::add(side, &ops::reshape(&p, &[t, n, ss[2]])?)?)
}

/// Logits for a raw clip with deterministic (segment-centre) sampling.
pub fn network_forward(video: &Tensor, model: &TdsModel) -> Result<Tensor> {
    let t_raw = video.shape().get(1).copied().unwrap_or(0);
    if t_raw < model.cfg.frames {
        return Err(ModelError::Invalid(format!(
            "clip has {t_raw} frames but {} are sampled",
            model.cfg.frames
        )));
    }
    let idx = sparse_sample(t_raw, model.cfg.frames, None).map_err(|e| ModelError::Invalid(e.to_string()))?;
    Ok(model.forward(video, &idx, None)?.logits)
}

/// Label-smoothed cross-entropy `-Σ Y_i log softmax(z)_i` with
/// `Y = (1-ε)·onehot(y) + ε/N_c`.
pub fn ls_cross_entropy(logits: &Tensor, label: usize, smoothing: f64) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 1 {
        return Err(ModelError::Invalid(format!("logits must be a vector, got {s:?}")));
    }
    let nc = s[0];
    if label >= nc {
        return Err(ModelError::Invalid(format!("label {label} outside {nc} classes")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(ModelError::Invalid(format!("smoothing must lie in [0, 1), got {smoothing}")));
    }
    let _scope = branch_scope(Branch::Other);
    let target = Tensor::from_fn(&[nc], |i| {
        smoothing / nc as f64 + if i == label { 1.0 - smoothing } else { 0.0 }
    });
    let lp = ops::log_softmax(logits)?;
    Ok(ops::scale(&ops::sum(&ops::mul(&lp, &target)?)?, -1.0)?)
}
