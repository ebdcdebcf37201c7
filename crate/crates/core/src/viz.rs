//! Patch-level activation maps and binary PPM output.

use std::io::{self, Write};

use crate::autodiff::{no_grad, Tensor};
use crate::data::sparse_sample;
use crate::model::adapters::motion_features;
use crate::model::{ModelError, Result, TdsModel};

/// Row-major `gh×gw` maps, one per sampled frame.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ActivationMaps {
    pub layer: usize,
    pub grid: (usize, usize),
    pub indices: Vec<usize>,
    /// Channel L2 norm of side patch tokens after `layer`.
    pub with_sme: Vec<Vec<f64>>,
    /// Same, from a copy of the model with every motion adapter removed.
    pub without_sme: Vec<Vec<f64>>,
    /// Channel L2 norm of the motion-adapter output.
    pub motion: Vec<Vec<f64>>,
}

fn patch_norms(tokens: &Tensor, skip_cls: bool) -> Vec<Vec<f64>> {
    let (t, s, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let first = usize::from(skip_cls);
    (0..t)
        .map(|f| {
            (first..s)
                .map(|j| {
                    let row = &tokens.data()[(f * s + j) * c..(f * s + j + 1) * c];
                    row.iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn activation_maps(model: &TdsModel, video: &Tensor, layer: usize) -> Result<ActivationMaps> {
    let cfg = &model.cfg;
    if layer >= cfg.layers {
        return Err(ModelError::Invalid(format!("layer {layer} out of range for {} layers", cfg.layers)));
    }
    let sme = model.sme.as_ref().or(model.sme_frozen.as_ref()).ok_or_else(|| {
        ModelError::Invalid(format!("sme_mode `{}` has no motion adapter to visualise", cfg.sme_mode))
    })?;
    let _ng = no_grad();
    let indices = sparse_sample(video.shape()[1], cfg.frames, None)
        .map_err(|e| ModelError::Invalid(e.to_string()))?;
    let with = model.forward(video, &indices, None)?;
    let mut plain = model.clone();
    plain.sme = None;
    plain.sme_frozen = None;
    plain.motion_head = None;
    let without = plain.forward(video, &indices, None)?;
    let motion = motion_features(video, &indices, sme, &model.store)?;
    Ok(ActivationMaps {
        layer,
        grid: cfg.grid(),
        with_sme: patch_norms(&with.side_tokens[layer], true),
        without_sme: patch_norms(&without.side_tokens[layer], true),
        motion: patch_norms(&motion, false),
        indices,
    })
}

/// Panels laid out left to right, each scaled to 0..255 by its own maximum
/// and enlarged `scale` times, with a one-cell white gutter between them.
pub fn compose_panels(panels: &[&[f64]], grid: (usize, usize), scale: usize) -> (usize, usize, Vec<u8>) {
    let (gh, gw) = grid;
    let cell = scale.max(1);
    let n = panels.len();
    let width = (n * gw + n.saturating_sub(1)) * cell;
    let height = gh * cell;
    let mut gray = vec![255u8; width * height];
    for (p, map) in panels.iter().enumerate() {
        let peak = map.iter().cloned().fold(0.0, f64::max);
        let x0 = p * (gw + 1) * cell;
        for y in 0..height {
            for x in 0..gw * cell {
                let v = map[(y / cell) * gw + x / cell];
                let level = if peak > 0.0 { (v / peak * 255.0).round() } else { 0.0 };
                gray[y * width + x0 + x] = level as u8;
            }
        }
    }
    (width, height, gray)
}

/// Grayscale image as binary P6 with equal RGB channels.
pub fn write_ppm<W: Write>(mut w: W, width: usize, height: usize, gray: &[u8]) -> io::Result<()> {
    write!(w, "P6\n{width} {height}\n255\n")?;
    let rgb: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g]).collect();
    w.write_all(&rgb)
}
