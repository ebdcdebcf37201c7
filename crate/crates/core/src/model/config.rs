use std::fmt;
use std::str::FromStr;

use crate::config::{join, parse_bool, parse_list, parse_value, ConfigError, KvConfig};

use super::adapters::TdVariant;

/// Where the frame-difference motion term enters the network.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SmeMode {
    Off,
    /// Added to the side network's input embedding.
    Temporal,
    /// Added to the frozen encoder's input embedding.
    Spatial,
    SpatialTemporal,
    /// Added to the side stream after the first side block.
    Cross,
    /// Classified by its own head, logits summed.
    Additional,
}

impl SmeMode {
    pub const ALL: [SmeMode; 6] = [
        SmeMode::Off,
        SmeMode::Temporal,
        SmeMode::Spatial,
        SmeMode::SpatialTemporal,
        SmeMode::Cross,
        SmeMode::Additional,
    ];

    pub fn feeds_frozen(self) -> bool {
        matches!(self, SmeMode::Spatial | SmeMode::SpatialTemporal)
    }

    pub fn feeds_side_input(self) -> bool {
        matches!(self, SmeMode::Temporal | SmeMode::SpatialTemporal)
    }
}

impl fmt::Display for SmeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SmeMode::Off => "off",
            SmeMode::Temporal => "temporal",
            SmeMode::Spatial => "spatial",
            SmeMode::SpatialTemporal => "spatial+temporal",
            SmeMode::Cross => "cross",
            SmeMode::Additional => "additional",
        })
    }
}

impl FromStr for SmeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SmeMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("expected one of off, temporal, spatial, spatial+temporal, cross, additional"))
    }
}

impl fmt::Display for TdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TdVariant::Pool => "pool",
            TdVariant::Conv => "conv",
        })
    }
}

impl FromStr for TdVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pool" => Ok(TdVariant::Pool),
            "conv" => Ok(TdVariant::Conv),
            _ => Err("expected `pool` or `conv`".into()),
        }
    }
}

/// What occupies a layer whose temporal-difference adapter is masked off.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TdFallback {
    /// `3×1×1` convolution with residual.
    Conv3d,
    Identity,
}

impl fmt::Display for TdFallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TdFallback::Conv3d => "conv3d",
            TdFallback::Identity => "identity",
        })
    }
}

impl FromStr for TdFallback {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "conv3d" => Ok(TdFallback::Conv3d),
            "identity" => Ok(TdFallback::Identity),
            _ => Err("expected `conv3d` or `identity`".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub layers: usize,
    pub frozen_dim: usize,
    pub frozen_heads: usize,
    pub side_dim: usize,
    pub side_heads: usize,
    pub mlp_ratio: usize,
    pub window_radius: usize,
    pub reduction: usize,
    pub pool_kernel: usize,
    pub alpha: f64,
    pub beta: f64,
    pub td_layers: Vec<bool>,
    pub td_variant: TdVariant,
    pub td_fallback: TdFallback,
    pub num_classes: usize,
    pub label_smoothing: f64,
    pub cls_shift: bool,
    pub shift_div: usize,
    pub shift_before_fuse: bool,
    pub sme_mode: SmeMode,
    pub frozen_seed: u64,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            frames: 8,
            height: 32,
            width: 32,
            patch: 8,
            layers: 4,
            frozen_dim: 64,
            frozen_heads: 4,
            side_dim: 32,
            side_heads: 4,
            mlp_ratio: 4,
            window_radius: 2,
            reduction: 2,
            pool_kernel: 3,
            alpha: 1.0,
            beta: 1.0,
            td_layers: vec![true; 4],
            td_variant: TdVariant::Pool,
            td_fallback: TdFallback::Conv3d,
            num_classes: 4,
            label_smoothing: 0.1,
            cls_shift: true,
            shift_div: 4,
            shift_before_fuse: false,
            sme_mode: SmeMode::Temporal,
            frozen_seed: 400,
        }
    }

    /// ViT-B/16 backbone geometry with a 320-wide side network.
    pub fn paper() -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            patch: 16,
            layers: 12,
            frozen_dim: 768,
            frozen_heads: 12,
            side_dim: 320,
            side_heads: 5,
            td_layers: vec![true; 12],
            num_classes: 174,
            ..Self::tiny()
        }
    }

    /// Same model with every temporal operator removed.
    pub fn frame_factorized(&self) -> Self {
        ModelConfig {
            sme_mode: SmeMode::Off,
            td_layers: vec![false; self.layers],
            td_fallback: TdFallback::Identity,
            cls_shift: false,
            ..self.clone()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Whether the frame-difference term is present at all.
    pub fn motion_enabled(&self) -> bool {
        self.sme_mode != SmeMode::Off && self.window_radius > 0
    }
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "frames" => self.frames = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "patch" => self.patch = parse_value(key, value)?,
            "layers" => {
                let l: usize = parse_value(key, value)?;
                if self.td_layers.len() != l {
                    let fill = self.td_layers.iter().all(|&b| b);
                    self.td_layers = vec![fill; l];
                }
                self.layers = l;
            }
            "frozen_dim" => self.frozen_dim = parse_value(key, value)?,
            "frozen_heads" => self.frozen_heads = parse_value(key, value)?,
            "side_dim" => self.side_dim = parse_value(key, value)?,
            "side_heads" => self.side_heads = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "window_radius" => self.window_radius = parse_value(key, value)?,
            "reduction" => self.reduction = parse_value(key, value)?,
            "pool_kernel" => self.pool_kernel = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "td_layers" => {
                self.td_layers = value
                    .split(',')
                    .map(|v| parse_bool(key, v))
                    .collect::<Result<_, _>>()?;
            }
            "td_variant" => self.td_variant = parse_value(key, value)?,
            "td_fallback" => self.td_fallback = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "label_smoothing" => self.label_smoothing = parse_value(key, value)?,
            "cls_shift" => self.cls_shift = parse_bool(key, value)?,
            "shift_div" => self.shift_div = parse_value(key, value)?,
            "shift_before_fuse" => self.shift_before_fuse = parse_bool(key, value)?,
            "sme_mode" => self.sme_mode = parse_value(key, value)?,
            "frozen_seed" => self.frozen_seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mask: Vec<u8> = self.td_layers.iter().map(|&b| u8::from(b)).collect();
        vec![
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("patch", self.patch.to_string()),
            ("layers", self.layers.to_string()),
            ("frozen_dim", self.frozen_dim.to_string()),
            ("frozen_heads", self.frozen_heads.to_string()),
            ("side_dim", self.side_dim.to_string()),
            ("side_heads", self.side_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("window_radius", self.window_radius.to_string()),
            ("reduction", self.reduction.to_string()),
            ("pool_kernel", self.pool_kernel.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("td_layers", join(&mask)),
            ("td_variant", self.td_variant.to_string()),
            ("td_fallback", self.td_fallback.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("cls_shift", self.cls_shift.to_string()),
            ("shift_div", self.shift_div.to_string()),
            ("shift_before_fuse", self.shift_before_fuse.to_string()),
            ("sme_mode", self.sme_mode.to_string()),
            ("frozen_seed", self.frozen_seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.frames == 0 || self.layers == 0 || self.num_classes == 0 {
            return bad("frames, layers, and num_classes must be positive".into());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}×{} frames do not split into {}-pixel patches", self.height, self.width, self.patch));
        }
        if self.frozen_heads == 0 || self.frozen_dim % self.frozen_heads != 0 {
            return bad(format!("frozen_dim {} not divisible by {} heads", self.frozen_dim, self.frozen_heads));
        }
        if self.side_heads == 0 || self.side_dim % self.side_heads != 0 {
            return bad(format!("side_dim {} not divisible by {} heads", self.side_dim, self.side_heads));
        }
        if self.reduction == 0 || self.side_dim % self.reduction != 0 {
            return bad(format!("side_dim {} not divisible by reduction {}", self.side_dim, self.reduction));
        }
        if self.pool_kernel % 2 == 0 {
            return bad(format!("pool_kernel must be odd, got {}", self.pool_kernel));
        }
        if self.td_layers.len() != self.layers {
            return bad(format!("td_layers has {} entries for {} layers", self.td_layers.len(), self.layers));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be finite".into());
        }
        if self.cls_shift && (self.shift_div < 2 || self.side_dim < self.shift_div) {
            return bad(format!("shift_div {} does not fit side_dim {}", self.shift_div, self.side_dim));
        }
        if self.sme_mode == SmeMode::Cross && self.layers < 2 {
            return bad("cross placement needs at least two layers".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Parse a comma-separated value list for ablation sweeps.
pub fn sweep_values(axis: &str, values: &str) -> Result<Vec<String>, ConfigError> {
    let v: Vec<String> = parse_list(axis, values)?;
    if v.is_empty() || v.iter().any(String::is_empty) {
        return Err(ConfigError::Invalid(format!("empty value in `{values}`")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::tiny().tokens(), 17);
        assert_eq!(ModelConfig::paper().tokens(), 197);
    }

    #[test]
    fn mask_follows_layer_count() {
        let mut c = ModelConfig::tiny();
        c.set("layers", "2").unwrap();
        assert_eq!(c.td_layers, vec![true, true]);
        c.set("td_layers", "1,0").unwrap();
        c.validate().unwrap();
        c.set("td_layers", "1").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn sme_mode_names() {
        for m in SmeMode::ALL {
            assert_eq!(m.to_string().parse::<SmeMode>().unwrap(), m);
        }
        assert!("sideways".parse::<SmeMode>().is_err());
    }
}
