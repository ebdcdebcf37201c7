//! Motion operators: frame-difference enhancement at the side input,
//! the temporal-difference bottleneck, and the CLS token shift.

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use super::vit::{patchify, TokenEmbedding, INIT_STD};
use super::{ModelError, Result};
use crate::autodiff::ops::{self, PadMode, PoolPadding};
use crate::autodiff::{branch_scope, Branch, Tensor};

/// Raw frame indices `i-n ..= i+n`, clamped into `0..t_raw`.
pub fn window_indices(t_raw: usize, center: usize, radius: usize) -> Vec<usize> {
    (0..=2 * radius)
        .map(|j| (center + j).saturating_sub(radius).min(t_raw - 1))
        .collect()
}

fn video_frames(video: &Tensor) -> Result<usize> {
    match video.shape() {
        [3, t, _, _] => Ok(*t),
        s => Err(ModelError::Invalid(format!("video must be [3×T×H×W], got {s:?}"))),
    }
}

/// Frames around `center` of a `[3×T×H×W]` video, edges replicated:
/// `[3×(2n+1)×H×W]`.
pub fn local_window(video: &Tensor, center: usize, radius: usize) -> Result<Tensor> {
    let t_raw = video_frames(video)?;
    if center >= t_raw {
        return Err(ModelError::Invalid(format!("frame {center} outside clip of {t_raw} frames")));
    }
    Ok(ops::index_select(video, 1, &window_indices(t_raw, center, radius))?)
}

/// Consecutive forward differences of a `[3×F×H×W]` window, stacked along
/// channels in time order: `[3·(F-1)×H×W]`.
pub fn frame_differences(window: &Tensor) -> Result<Tensor> {
    let s = window.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(ModelError::Invalid(format!("need a [C×F×H×W] window with F ≥ 2, got {s:?}")));
    }
    let (c, f, h, w) = (s[0], s[1], s[2], s[3]);
    let d = ops::sub(&ops::narrow(window, 1, 1, f - 1)?, &ops::narrow(window, 1, 0, f - 1)?)?;
    let d = ops::permute(&d, &[1, 0, 2, 3])?;
    Ok(ops::reshape(&d, &[c * (f - 1), h, w])?)
}

#[derive(Clone, Debug)]
pub struct SmeParams {
    /// Patch-sized, patch-strided convolution stored as `[(6n·P·P)×C_out]`,
    /// rows ordered (difference channel, patch row, patch column).
    pub conv: ParamId,
    pub alpha: f64,
    pub beta: f64,
    pub radius: usize,
    pub patch: usize,
}

impl SmeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        radius: usize,
        patch: usize,
        out_dim: usize,
        alpha: f64,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if radius == 0 {
            return Err(ModelError::Invalid("motion window radius must be at least 1".into()));
        }
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(ModelError::Invalid(format!("fusion weights must be finite, got {alpha}, {beta}")));
        }
        let rows = 6 * radius * patch * patch;
        let conv = store.add(name, &[rows, out_dim], Init::Normal(INIT_STD), true, rng);
        Ok(SmeParams { conv, alpha, beta, radius, patch })
    }
}

/// Convolved frame differences around each sampled frame: `[T×N×C]`.
pub fn motion_features(video: &Tensor, indices: &[usize], sme: &SmeParams, store: &ParamStore) -> Result<Tensor> {
    let t_raw = video_frames(video)?;
    let (n, f) = (sme.radius, 2 * sme.radius + 1);
    let mut gather = Vec::with_capacity(indices.len() * f);
    for &i in indices {
        if i >= t_raw {
            return Err(ModelError::Invalid(format!("frame {i} outside clip of {t_raw} frames")));
        }
        gather.extend(window_indices(t_raw, i, n));
    }
    let (t, h, w) = (indices.len(), video.shape()[2], video.shape()[3]);
    let win = ops::reshape(&ops::index_select(video, 1, &gather)?, &[3, t, f, h, w])?;
    let d = ops::sub(&ops::narrow(&win, 2, 1, 2 * n)?, &ops::narrow(&win, 2, 0, 2 * n)?)?;
    // [3×T×2n×H×W] → [(2n·3)×T×H×W], difference-major channels
    let d = ops::reshape(&ops::permute(&d, &[2, 0, 1, 3, 4])?, &[6 * n, t, h, w])?;
    let p = patchify(&d, sme.patch)?;
    let grid = p.shape()[1];
    let k = p.shape()[2];
    let weight = &store[sme.conv];
    if weight.shape()[0] != k {
        return Err(ModelError::Invalid(format!(
            "motion conv expects {} inputs per patch, got {k}",
            weight.shape()[0]
        )));
    }
    let m = ops::matmul(&ops::reshape(&p, &[t * grid, k])?, weight)?;
    Ok(ops::reshape(&m, &[t, grid, weight.shape()[1]])?)
}

/// `α·[0; motion] + β·appearance` for the sampled frames: `[T×(1+N)×C]`.
/// The class-token row receives no motion term.
pub fn sme_forward(
    video: &Tensor,
    indices: &[usize],
    sme: &SmeParams,
    store: &ParamStore,
    appearance: &TokenEmbedding,
) -> Result<Tensor> {
    let frames = ops::index_select(video, 1, indices)?;
    let a = appearance.forward(store, &frames)?;
    let _scope = branch_scope(Branch::Adapter);
    let m = motion_features(video, indices, sme, store)?;
    let m = ops::pad(&m, 1, 1, 0, PadMode::Zero)?;
    Ok(ops::add(&ops::scale(&a, sme.beta)?, &ops::scale(&m, sme.alpha)?)?)
}

/// `Z - maxpool_t(Z)` over a `[C×T×H×W]` volume with a `k×1×1` window and
/// replicate padding in time.
pub fn pool_difference(z: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 {
        return Err(ModelError::Invalid(format!("pooling kernel must be odd, got {k}")));
    }
    let pooled = ops::maxpool3d(z, [k, 1, 1], [1, 1, 1], [k / 2, 0, 0], PoolPadding::Replicate)?;
    Ok(ops::sub(z, &pooled)?)
}

/// Displacement operator inside the temporal-difference bottleneck.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TdVariant {
    Pool,
    /// Learned `3×1×1` convolution in place of the max-pool.
    Conv,
}

#[derive(Clone, Debug)]
pub struct TdParams {
    pub reduce: ParamId,
    pub expand: ParamId,
    pub temporal: Option<ParamId>,
    pub kernel: usize,
    pub reduction: usize,
}

impl TdParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        reduction: usize,
        kernel: usize,
        variant: TdVariant,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || dim % reduction != 0 {
            return Err(ModelError::Invalid(format!("width {dim} is not divisible by reduction {reduction}")));
        }
        if kernel % 2 == 0 {
            return Err(ModelError::Invalid(format!("pooling kernel must be odd, got {kernel}")));
        }
        let mid = dim / reduction;
        let reduce = store.add(&format!("{prefix}.reduce"), &[mid, dim, 1, 1, 1], Init::Normal(INIT_STD), true, rng);
        let expand = store.add(&format!("{prefix}.expand"), &[dim, mid, 1, 1, 1], Init::Normal(INIT_STD), true, rng);
        let temporal = (variant == TdVariant::Conv).then(|| {
            store.add(&format!("{prefix}.temporal"), &[mid, mid, kernel, 1, 1], Init::Normal(INIT_STD), true, rng)
        });
        Ok(TdParams { reduce, expand, temporal, kernel, reduction })
    }
}

/// Split `[T×(1+N)×C]` into the class row and patch volume `[C×T×H'×W']`.
fn to_volume(tokens: &Tensor, grid: (usize, usize)) -> Result<(Tensor, Tensor)> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != grid.0 * grid.1 + 1 {
        return Err(ModelError::Invalid(format!(
            "tokens {s:?} do not hold a {}×{} patch grid plus class token",
            grid.0, grid.1
        )));
    }
    let (t, n, c) = (s[0], s[1] - 1, s[2]);
    let cls = ops::narrow(tokens, 1, 0, 1)?;
    let patches = ops::narrow(tokens, 1, 1, n)?;
    let vol = ops::reshape(&ops::permute(&patches, &[2, 0, 1])?, &[c, t, grid.0, grid.1])?;
    Ok((cls, vol))
}

/// Inverse of [`to_volume`] with a residual on the patch rows.
fn from_volume(tokens: &Tensor, cls: Tensor, delta: &Tensor) -> Result<Tensor> {
    let (t, n, c) = (tokens.shape()[0], tokens.shape()[1] - 1, tokens.shape()[2]);
    let delta = ops::permute(&ops::reshape(delta, &[c, t, n])?, &[1, 2, 0])?;
    let patches = ops::add(&ops::narrow(tokens, 1, 1, n)?, &delta)?;
    Ok(ops::concat(&[cls, patches], 1)?)
}

/// Temporal-difference adapter: reduce, `Z - Pool(Z)`, expand, residual.
/// The class token passes through untouched.
pub fn td_forward(tokens: &Tensor, td: &TdParams, store: &ParamStore, grid: (usize, usize)) -> Result<Tensor> {
    let (cls, vol) = to_volume(tokens, grid)?;
    let z = ops::conv3d(&vol, &store[td.reduce], None, [1; 3], [0; 3])?;
    let dz = match td.temporal {
        None => pool_difference(&z, td.kernel)?,
        Some(w) => {
            let moved = ops::conv3d(&z, &store[w], None, [1; 3], [td.kernel / 2, 0, 0])?;
            ops::sub(&z, &moved)?
        }
    };
    let e = ops::conv3d(&dz, &store[td.expand], None, [1; 3], [0; 3])?;
    from_volume(tokens, cls, &e)
}

/// Channel-preserving `3×1×1` convolution with residual on patch rows; the
/// reference used where the temporal-difference adapter is switched off.
#[derive(Clone, Debug)]
pub struct TemporalConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl TemporalConvParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        TemporalConvParams {
            w: store.add(&format!("{prefix}.w"), &[dim, dim, 3, 1, 1], Init::Normal(INIT_STD), true, rng),
            b: store.add(&format!("{prefix}.b"), &[dim], Init::Zeros, true, rng),
        }
    }
}

pub fn temporal_conv_forward(
    tokens: &Tensor,
    p: &TemporalConvParams,
    store: &ParamStore,
    grid: (usize, usize),
) -> Result<Tensor> {
    let (cls, vol) = to_volume(tokens, grid)?;
    let e = ops::conv3d(&vol, &store[p.w], Some(&store[p.b]), [1; 3], [1, 0, 0])?;
    from_volume(tokens, cls, &e)
}

/// Shift the first `C/div` channels of a `[T×C]` class-token sequence one
/// frame backward (frame t takes t+1) and the next `C/div` one frame
/// forward; vacated slots are zero.
pub fn cls_shift(cls: &Tensor, div: usize) -> Result<Tensor> {
    let s = cls.shape();
    if s.len() != 2 || div < 2 || s[1] < div {
        return Err(ModelError::Invalid(format!(
            "class-token shift needs [T×C] with C ≥ {div}, got {s:?}"
        )));
    }
    let (c, fold) = (s[1], s[1] / div);
    let back = ops::shift(&ops::narrow(cls, 1, 0, fold)?, 0, 1)?;
    let fwd = ops::shift(&ops::narrow(cls, 1, fold, fold)?, 0, -1)?;
    let mut parts = vec![back, fwd];
    if c > 2 * fold {
        parts.push(ops::narrow(cls, 1, 2 * fold, c - 2 * fold)?);
    }
    Ok(ops::concat(&parts, 1)?)
}

/// [`cls_shift`] applied to the class row of `[T×(1+N)×C]` tokens.
pub fn shift_class_tokens(tokens: &Tensor, div: usize) -> Result<Tensor> {
    let (t, s, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let cls = ops::reshape(&ops::narrow(tokens, 1, 0, 1)?, &[t, c])?;
    let shifted = ops::reshape(&cls_shift(&cls, div)?, &[t, 1, c])?;
    if s == 1 {
        return Ok(shifted);
    }
    Ok(ops::concat(&[shifted, ops::narrow(tokens, 1, 1, s - 1)?], 1)?)
}
