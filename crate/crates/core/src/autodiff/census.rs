//! Inventory of what a recorded graph keeps alive for its backward pass.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::context::BranchCounts;
use super::tensor::Tensor;
use super::Branch;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphCensus {
    /// Recorded nodes reachable from the root, by the branch that built them.
    pub nodes: BranchCounts<usize>,
    /// Bytes held for backward, by the branch of the node holding them.
    /// Parameters are excluded; shared storage is counted once.
    pub retained_bytes: BranchCounts<u64>,
    /// Retained activations that were produced inside the frozen branch
    /// (e.g. detached features kept by a trainable projection).
    pub frozen_origin_tensors: usize,
    pub frozen_origin_bytes: u64,
    /// Distinct trainable parameters the graph reaches, and their element count.
    pub trainable_leaves: usize,
    pub trainable_elements: u64,
}

impl GraphCensus {
    pub fn total_bytes(&self) -> u64 {
        self.retained_bytes.total()
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes.total()
    }
}

/// Walk every recorded node reachable from `root`.
pub fn census(root: &Tensor) -> GraphCensus {
    let mut out = GraphCensus::default();
    let mut seen_nodes = HashSet::new();
    let mut seen_buffers = HashSet::new();
    let mut seen_leaves = HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        let Some(node) = &t.0.node else {
            if t.is_param() && t.requires_grad() && seen_leaves.insert(t.id()) {
                out.trainable_leaves += 1;
                out.trainable_elements += t.numel() as u64;
            }
            continue;
        };
        if !seen_nodes.insert(t.id()) {
            continue;
        }
        *out.nodes.get_mut(node.branch) += 1;
        *out.retained_bytes.get_mut(node.branch) += node.extra_bytes as u64;
        for s in &node.saved {
            if s.is_param() || !seen_buffers.insert(s.buffer_id()) {
                continue;
            }
            let bytes = (s.numel() * std::mem::size_of::<f64>()) as u64;
            *out.retained_bytes.get_mut(node.branch) += bytes;
            if s.origin() == Branch::Frozen {
                out.frozen_origin_tensors += 1;
                out.frozen_origin_bytes += bytes;
            }
        }
        stack.extend(node.parents.iter().flatten().cloned());
    }
    out
}
