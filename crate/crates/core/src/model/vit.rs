//! Patch embedding, pre-norm transformer blocks, and the frozen encoder.

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use super::{ModelError, Result};
use crate::autodiff::ops;
use crate::autodiff::{branch_scope, Branch, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` over the last axis of a `[M×in]` input.
#[derive(Copy, Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Linear {
        let w = store.add(&format!("{name}.w"), &[fan_in, fan_out], Init::Normal(std), trainable, rng);
        let b = bias.then(|| store.add(&format!("{name}.b"), &[fan_out], Init::Zeros, trainable, rng));
        Linear { w, b }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        linear(x, &store[self.w], self.b.map(|b| &store[b]))
    }
}

pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = ops::matmul(x, w)?;
    Ok(match b {
        Some(b) => ops::add(&y, b)?,
        None => y,
    })
}

/// Cut `[C×T×H×W]` into non-overlapping `P×P` patches: `[T×N×(C·P·P)]`,
/// patches in row-major grid order, each flattened channel-major.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(ModelError::Invalid(format!("patchify expects [C×T×H×W], got {s:?}")));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Invalid(format!(
            "frame {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let x = ops::reshape(x, &[c, t, gh, patch, gw, patch])?;
    let x = ops::permute(&x, &[1, 2, 4, 0, 3, 5])?;
    Ok(ops::reshape(&x, &[t, gh * gw, c * patch * patch])?)
}

/// Linear projection of every patch of one `[3×H×W]` frame: `[N×C]`.
pub fn patch_embed(frame: &Tensor, patch: usize, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(ModelError::Invalid(format!("patch_embed expects [3×H×W], got {s:?}")));
    }
    let video = ops::reshape(frame, &[s[0], 1, s[1], s[2]])?;
    let e = patch_embed_frames(&video, patch, w, b)?;
    let n = e.shape()[1];
    Ok(ops::reshape(&e, &[n, e.shape()[2]])?)
}

/// [`patch_embed`] over all frames of `[3×T×H×W]`: `[T×N×C]`.
pub fn patch_embed_frames(video: &Tensor, patch: usize, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let p = patchify(video, patch)?;
    let (t, n, k) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let e = linear(&ops::reshape(&p, &[t * n, k])?, w, b)?;
    Ok(ops::reshape(&e, &[t, n, w.shape()[1]])?)
}

/// `[cls; patches] + pos` for a single frame.
pub fn build_frame_tokens(patches: &Tensor, cls: &Tensor, pos: &Tensor) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 2 {
        return Err(ModelError::Invalid(format!("patches must be [N×C], got {s:?}")));
    }
    let t = build_tokens(&ops::reshape(patches, &[1, s[0], s[1]])?, cls, pos)?;
    Ok(ops::reshape(&t, &[s[0] + 1, s[1]])?)
}

/// Per-frame `[cls; patches] + pos` over `[T×N×C]`.
pub fn build_tokens(patches: &Tensor, cls: &Tensor, pos: &Tensor) -> Result<Tensor> {
    let s = patches.shape();
    let c = s[s.len() - 1];
    if s.len() != 3 || cls.shape() != [c] || pos.shape() != [s[1] + 1, c] {
        return Err(ModelError::Invalid(format!(
            "token shapes disagree: patches {s:?}, cls {:?}, pos {:?}",
            cls.shape(),
            pos.shape()
        )));
    }
    let cls = ops::index_select(&ops::reshape(cls, &[1, 1, c])?, 0, &vec![0; s[0]])?;
    let x = ops::concat(&[cls, patches.clone()], 1)?;
    Ok(ops::add(&x, pos)?)
}

#[derive(Clone, Debug)]
pub struct VitBlockParams {
    pub dim: usize,
    pub heads: usize,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VitBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ModelError::Invalid(format!("width {dim} is not divisible by {heads} heads")));
        }
        let hidden = dim * mlp_ratio;
        Ok(VitBlockParams {
            dim,
            heads,
            ln1_g: store.add(&format!("{prefix}.ln1.g"), &[dim], Init::Ones, trainable, rng),
            ln1_b: store.add(&format!("{prefix}.ln1.b"), &[dim], Init::Zeros, trainable, rng),
            qkv: Linear::new(store, &format!("{prefix}.attn.qkv"), dim, 3 * dim, true, std, trainable, rng),
            proj: Linear::new(store, &format!("{prefix}.attn.proj"), dim, dim, true, std, trainable, rng),
            ln2_g: store.add(&format!("{prefix}.ln2.g"), &[dim], Init::Ones, trainable, rng),
            ln2_b: store.add(&format!("{prefix}.ln2.b"), &[dim], Init::Zeros, trainable, rng),
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), dim, hidden, true, std, trainable, rng),
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), hidden, dim, true, std, trainable, rng),
        })
    }
}

/// Multi-head self-attention within each frame of `[T×S×C]` (already
/// normalized), returned as `[T·S×C]` before the output projection.
fn attention(x: &Tensor, p: &VitBlockParams, store: &ParamStore) -> Result<Tensor> {
    let (t, s, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h, d) = (p.heads, c / p.heads);
    let qkv = p.qkv.forward(store, &ops::reshape(x, &[t * s, c])?)?;
    let qkv = ops::reshape(&qkv, &[t, s, 3, h, d])?;
    let qkv = ops::permute(&qkv, &[2, 0, 3, 1, 4])?;
    let qkv = ops::reshape(&qkv, &[3 * t * h, s, d])?;
    let q = ops::narrow(&qkv, 0, 0, t * h)?;
    let k = ops::narrow(&qkv, 0, t * h, t * h)?;
    let v = ops::narrow(&qkv, 0, 2 * t * h, t * h)?;
    let scores = ops::scale(&ops::bmm(&q, &k, true)?, 1.0 / (d as f64).sqrt())?;
    let att = ops::softmax(&scores)?;
    let out = ops::bmm(&att, &v, false)?;
    let out = ops::permute(&ops::reshape(&out, &[t, h, s, d])?, &[0, 2, 1, 3])?;
    Ok(ops::reshape(&out, &[t * s, c])?)
}

/// Pre-norm block: `x += MHSA(LN(x)); x += FFN(LN(x))`.
pub fn vit_block_forward(tokens: &Tensor, p: &VitBlockParams, store: &ParamStore) -> Result<Tensor> {
    vit_block_forward_with(tokens, p, store, None)
}

pub type TokenHook<'a> = &'a dyn Fn(&Tensor) -> Result<Tensor>;

/// [`vit_block_forward`] with an optional transform applied to the block
/// input before the attention branch (used for in-backbone adapters).
pub fn vit_block_forward_with(
    tokens: &Tensor,
    p: &VitBlockParams,
    store: &ParamStore,
    pre_attention: Option<TokenHook<'_>>,
) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 || s[2] != p.dim {
        return Err(ModelError::Invalid(format!("block of width {} got tokens {s:?}", p.dim)));
    }
    let (t, n, c) = (s[0], s[1], s[2]);
    let x = match pre_attention {
        Some(hook) => hook(tokens)?,
        None => tokens.clone(),
    };
    let flat = ops::reshape(&x, &[t * n, c])?;
    let h = ops::layer_norm(&flat, Some(&store[p.ln1_g]), Some(&store[p.ln1_b]), LN_EPS)?;
    let a = attention(&ops::reshape(&h, &[t, n, c])?, p, store)?;
    let flat = ops::add(&flat, &p.proj.forward(store, &a)?)?;
    let h = ops::layer_norm(&flat, Some(&store[p.ln2_g]), Some(&store[p.ln2_b]), LN_EPS)?;
    let h = ops::gelu(&p.fc1.forward(store, &h)?)?;
    let flat = ops::add(&flat, &p.fc2.forward(store, &h)?)?;
    Ok(ops::reshape(&flat, &[t, n, c])?)
}

pub const INIT_STD: f64 = 0.02;

/// Patch projection plus class token and positional embedding.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub patch: usize,
    pub dim: usize,
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
}

impl TokenEmbedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        patch: usize,
        tokens: usize,
        dim: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{prefix}.embed"), 3 * patch * patch, dim, true, INIT_STD, trainable, rng);
        let cls = store.add(&format!("{prefix}.cls"), &[dim], Init::Normal(INIT_STD), trainable, rng);
        let pos = store.add(&format!("{prefix}.pos"), &[tokens, dim], Init::Normal(INIT_STD), trainable, rng);
        TokenEmbedding { patch, dim, proj, cls, pos }
    }

    /// `[3×T×H×W]` to `[T×(1+N)×C]`.
    pub fn forward(&self, store: &ParamStore, video: &Tensor) -> Result<Tensor> {
        let e = patch_embed_frames(video, self.patch, &store[self.proj.w], self.proj.b.map(|b| &store[b]))?;
        build_tokens(&e, &store[self.cls], &store[self.pos])
    }
}

/// Stand-in for a pretrained image encoder: every weight is a frozen draw.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub embedding: TokenEmbedding,
    pub blocks: Vec<VitBlockParams>,
}

impl FrozenEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        patch: usize,
        tokens: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = TokenEmbedding::new(store, "frozen", patch, tokens, dim, false, rng);
        let blocks = (0..layers)
            .map(|l| {
                VitBlockParams::new(store, &format!("frozen.block{l}"), dim, heads, mlp_ratio, INIT_STD, false, rng)
            })
            .collect::<Result<_>>()?;
        Ok(FrozenEncoder { embedding, blocks })
    }
}

/// Run the frozen encoder and return the output of every block.
pub fn frozen_forward(video: &Tensor, enc: &FrozenEncoder, store: &ParamStore) -> Result<Vec<Tensor>> {
    frozen_forward_with(video, enc, store, None, None)
}

/// [`frozen_forward`] with an optional additive term on the token embedding
/// and an optional per-block input hook.
pub fn frozen_forward_with(
    video: &Tensor,
    enc: &FrozenEncoder,
    store: &ParamStore,
    embed_offset: Option<&Tensor>,
    hook: Option<&dyn Fn(usize, &Tensor) -> Result<Tensor>>,
) -> Result<Vec<Tensor>> {
    let _scope = branch_scope(Branch::Frozen);
    let mut x = enc.embedding.forward(store, video)?;
    if let Some(off) = embed_offset {
        x = ops::add(&x, off)?;
    }
    let mut outs = Vec::with_capacity(enc.blocks.len());
    for (l, block) in enc.blocks.iter().enumerate() {
        x = match hook {
            Some(h) => vit_block_forward_with(&x, block, store, Some(&|t: &Tensor| h(l, t)))?,
            None => vit_block_forward(&x, block, store)?,
        };
        outs.push(x.clone());
    }
    Ok(outs)
}
