//! FLOP counts and a census of what the training graph keeps alive for
//! backward, per branch and per training topology.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::census::{census, GraphCensus};
use crate::autodiff::BranchCounts;
use crate::autodiff::context::{flop_tally, reset_flop_tally};
use crate::autodiff::{branch_scope, ops, Branch, Tensor};
use crate::config::KvConfig;
use crate::model::adapters::TdVariant;
use crate::model::config::TdFallback;
use crate::model::vit::{Linear, INIT_STD};
use crate::model::{ls_cross_entropy, Init, ModelConfig, ModelError, ParamId, Result, TdsModel};

/// How gradients reach the trainable weights.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Trainable side network next to a frozen encoder; nothing flows back
    /// into the encoder.
    Side,
    /// The side network without temporal adapters, plus a spatio-temporal
    /// adapter inside every encoder block. Encoder weights stay frozen but
    /// the graph threads through them.
    InBackbone,
    /// The side network with every encoder weight unfrozen.
    Full,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::Side, Topology::InBackbone, Topology::Full];
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Side => "side",
            Topology::InBackbone => "inbackbone",
            Topology::Full => "full",
        })
    }
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "side" => Ok(Topology::Side),
            "inbackbone" | "in-backbone" => Ok(Topology::InBackbone),
            "full" => Ok(Topology::Full),
            other => Err(format!("unknown topology `{other}` (side, inbackbone, full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopMemReport {
    /// `None` for a purely analytic count.
    pub topology: Option<Topology>,
    /// Forward FLOPs (two per multiply-add) of matmuls and convolutions.
    pub flops: BranchCounts<u64>,
    pub total_flops: u64,
    pub retained_bytes: BranchCounts<u64>,
    pub total_retained_bytes: u64,
    pub retained_nodes: BranchCounts<usize>,
    /// Retained tensors produced inside the encoder (the fusion inputs
    /// for the side topology).
    pub frozen_origin_tensors: usize,
    pub frozen_origin_bytes: u64,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Trainable parameters actually reached by the recorded graph.
    pub graph_trainable_params: u64,
}

fn block_flops(t: u64, s: u64, c: u64, mlp: u64) -> u64 {
    2 * t * s * c * c * (4 + 2 * mlp) + 4 * t * s * s * c
}

/// Closed-form forward FLOPs of `cfg` in the side topology.
pub fn count_flops(cfg: &ModelConfig) -> Result<FlopMemReport> {
    cfg.validate().map_err(|e| ModelError::Invalid(e.to_string()))?;
    let model = TdsModel::new_meta(cfg)?;
    let (t, n) = (cfg.frames as u64, cfg.num_patches() as u64);
    let s = n + 1;
    let (cf, cs) = (cfg.frozen_dim as u64, cfg.side_dim as u64);
    let (p2, mlp, l) = ((cfg.patch * cfg.patch) as u64, cfg.mlp_ratio as u64, cfg.layers as u64);
    let nc = cfg.num_classes as u64;
    let embed = |c: u64| 2 * t * n * 3 * p2 * c;
    let motion = |c: u64| 2 * t * n * 6 * cfg.window_radius as u64 * p2 * c;

    let mut f = BranchCounts::<u64>::default();
    f.frozen = embed(cf) + l * block_flops(t, s, cf, mlp);
    f.side = embed(cs) + l * (2 * t * s * cf * cs + block_flops(t, s, cs, mlp)) + 2 * t * n * cs * nc;
    if model.motion_head.is_some() {
        f.side += 2 * t * n * cs * nc;
    }
    if model.sme.is_some() {
        f.adapter += motion(cs);
    }
    if model.sme_frozen.is_some() {
        f.adapter += motion(cf);
    }
    let mid = cs / cfg.reduction as u64;
    for &on in &cfg.td_layers {
        if on {
            f.adapter += td_increment(cfg);
            if cfg.td_variant == TdVariant::Conv {
                f.adapter += 2 * t * n * mid * mid * cfg.pool_kernel as u64;
            }
        } else if cfg.td_fallback == TdFallback::Conv3d {
            f.adapter += 2 * t * n * cs * cs * 3;
        }
    }
    Ok(FlopMemReport {
        topology: None,
        total_flops: f.total(),
        flops: f,
        retained_bytes: BranchCounts::default(),
        total_retained_bytes: 0,
        retained_nodes: BranchCounts::default(),
        frozen_origin_tensors: 0,
        frozen_origin_bytes: 0,
        trainable_params: model.store.trainable_count(),
        frozen_params: model.store.frozen_count(),
        graph_trainable_params: 0,
    })
}

/// FLOPs one temporal-difference adapter adds: the `1×1×1` reduce and
/// expand convolutions over every patch token.
pub fn td_increment(cfg: &ModelConfig) -> u64 {
    let (t, n, c) = (cfg.frames as u64, cfg.num_patches() as u64, cfg.side_dim as u64);
    2 * t * n * c * (c / cfg.reduction as u64) * 2
}

/// Bottleneck adapter inside an encoder block: down, `3×1×1` temporal
/// convolution, up, residual on the patch tokens.
struct BackboneAdapter {
    down: Linear,
    conv: ParamId,
    up: Linear,
}

/// Build the graph of one training step on a shape-only model and take a
/// census of it. Runs under the caller's grad mode, so wrapping the call
/// in [`crate::autodiff::no_grad`] audits inference.
pub fn audit_backward_memory(cfg: &ModelConfig, topology: Topology) -> Result<FlopMemReport> {
    let mut cfg = cfg.clone();
    if topology == Topology::InBackbone {
        cfg.td_layers = vec![false; cfg.layers];
        cfg.td_fallback = TdFallback::Identity;
    }
    let mut model = TdsModel::new_meta(&cfg)?;
    let video = Tensor::meta(&[3, cfg.frames, cfg.height, cfg.width]);
    let indices: Vec<usize> = (0..cfg.frames).collect();

    reset_flop_tally();
    let out = match topology {
        Topology::Side => model.forward(&video, &indices, None)?,
        Topology::Full => {
            model.store.set_trainable("frozen.", true);
            model.forward(&video, &indices, None)?
        }
        Topology::InBackbone => {
            let rng = &mut ChaCha8Rng::seed_from_u64(0);
            let (cf, ca) = (cfg.frozen_dim, cfg.side_dim);
            let adapters: Vec<BackboneAdapter> = (0..cfg.layers)
                .map(|l| {
                    let p = format!("backbone.adapter{l}");
                    let store = &mut model.store;
                    BackboneAdapter {
                        down: Linear::new(store, &format!("{p}.down"), cf, ca, true, INIT_STD, true, rng),
                        conv: store.add(&format!("{p}.conv"), &[ca, ca, 3, 1, 1], Init::Normal(INIT_STD), true, rng),
                        up: Linear::new(store, &format!("{p}.up"), ca, cf, true, INIT_STD, true, rng),
                    }
                })
                .collect();
            let grid = cfg.grid();
            let store = &model.store;
            let hook = |l: usize, x: &Tensor| -> Result<Tensor> {
                let _scope = branch_scope(Branch::Adapter);
                let a = &adapters[l];
                let (t, s, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let n = s - 1;
                let patches = ops::reshape(&ops::narrow(x, 1, 1, n)?, &[t * n, c])?;
                let h = a.down.forward(store, &patches)?;
                let ca = h.shape()[1];
                let vol = ops::reshape(&ops::permute(&ops::reshape(&h, &[t, n, ca])?, &[2, 0, 1])?, &[ca, t, grid.0, grid.1])?;
                let h = ops::conv3d(&vol, &store[a.conv], None, [1; 3], [1, 0, 0])?;
                let h = ops::reshape(&ops::permute(&ops::reshape(&h, &[ca, t, n])?, &[1, 2, 0])?, &[t * n, ca])?;
                let h = ops::reshape(&a.up.forward(store, &h)?, &[t, n, c])?;
                let patches = ops::add(&ops::narrow(x, 1, 1, n)?, &h)?;
                Ok(ops::concat(&[ops::narrow(x, 1, 0, 1)?, patches], 1)?)
            };
            model.forward_hooked(&video, &indices, &hook)?
        }
    };
    let loss = ls_cross_entropy(&out.logits, 0, cfg.label_smoothing)?;
    let flops = flop_tally();
    let c: GraphCensus = census(&loss);
    Ok(FlopMemReport {
        topology: Some(topology),
        total_flops: flops.total(),
        flops,
        total_retained_bytes: c.total_bytes(),
        retained_bytes: c.retained_bytes,
        retained_nodes: c.nodes,
        frozen_origin_tensors: c.frozen_origin_tensors,
        frozen_origin_bytes: c.frozen_origin_bytes,
        trainable_params: model.store.trainable_count(),
        frozen_params: model.store.frozen_count(),
        graph_trainable_params: c.trainable_elements,
    })
}

/// One report per topology, in the order given.
pub fn compare(cfg: &ModelConfig, topologies: &[Topology]) -> Result<Vec<FlopMemReport>> {
    topologies.iter().map(|&t| audit_backward_memory(cfg, t)).collect()
}

pub fn to_json(reports: &[FlopMemReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

fn mib(b: u64) -> String {
    format!("{:.3}", b as f64 / (1024.0 * 1024.0))
}

fn gflop(f: u64) -> String {
    format!("{:.4}", f as f64 * 1e-9)
}

/// Aligned text table; FLOPs in GFLOP, memory in MiB.
pub fn render_table(reports: &[FlopMemReport]) -> String {
    let header = [
        "topology",
        "gflop_frozen",
        "gflop_side",
        "gflop_adapter",
        "gflop_total",
        "mib_frozen",
        "mib_side",
        "mib_adapter",
        "mib_other",
        "mib_total",
        "frozen_nodes",
        "fusion_mib",
        "trainable",
        "frozen",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        rows.push(vec![
            r.topology.map_or("analytic".to_string(), |t| t.to_string()),
            gflop(r.flops.frozen),
            gflop(r.flops.side),
            gflop(r.flops.adapter),
            gflop(r.total_flops),
            mib(r.retained_bytes.frozen),
            mib(r.retained_bytes.side),
            mib(r.retained_bytes.adapter),
            mib(r.retained_bytes.other),
            mib(r.total_retained_bytes),
            r.retained_nodes.frozen.to_string(),
            mib(r.frozen_origin_bytes),
            r.trainable_params.to_string(),
            r.frozen_params.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len()).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (v, w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
