use std::collections::{BTreeMap, HashMap, HashSet};

use super::context::Branch;
use super::tensor::{BackwardCtx, Tensor, TensorId};
use super::{Result, TensorError};

/// Counters from one backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    pub nodes_visited: usize,
    /// Recorded nodes attributed to the frozen branch that were traversed.
    pub frozen_nodes_visited: usize,
}

/// Gradients keyed by the identity of the leaf they belong to.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<TensorId, Tensor>,
    pub stats: BackwardStats,
    /// The loss was not connected to anything requiring grad.
    pub detached: bool,
}

impl GradientMap {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: TensorId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// Element-wise sum of another map into this one (batch accumulation).
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        for (id, g) in &other.grads {
            match self.grads.get(id) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(TensorError::Shape {
                            op: "accumulate",
                            detail: format!("{:?} vs {:?}", mine.shape(), g.shape()),
                        });
                    }
                    let sum = mine.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                    self.grads.insert(*id, Tensor::new(g.shape(), sum)?);
                }
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
        self.stats.nodes_visited += other.stats.nodes_visited;
        self.stats.frozen_nodes_visited += other.stats.frozen_nodes_visited;
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            let data = g.data().iter().map(|v| v * s).collect();
            *g = Tensor::new(g.shape(), data).expect("same shape");
        }
    }
}

/// Post-order (inputs before consumers) over recorded nodes and grad leaves.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.id());
    while let Some((t, child)) = stack.pop() {
        let parents = t.0.node.as_ref().map_or(&[][..], |n| &n.parents[..]);
        let next = parents[child..]
            .iter()
            .enumerate()
            .find_map(|(i, p)| p.as_ref().filter(|p| !seen.contains(&p.id())).map(|p| (i, p)));
        match next {
            Some((i, p)) => {
                seen.insert(p.id());
                let p = p.clone();
                stack.push((t, child + i + 1));
                stack.push((p, 0));
            }
            None => order.push(t),
        }
    }
    order
}

/// Reverse-mode sweep from a scalar loss. Returns gradients for every leaf
/// that requires grad and is reachable; frozen leaves and anything upstream
/// of them are never visited because they were never recorded.
pub fn backward(loss: &Tensor) -> Result<GradientMap> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    if loss.is_meta() {
        return Err(TensorError::Meta("backward"));
    }
    if !loss.requires_grad() {
        log::warn!("backward called on a loss that is not connected to any trainable tensor");
        return Ok(GradientMap { detached: true, ..GradientMap::default() });
    }
    let order = topo_order(loss);
    let mut pending: HashMap<TensorId, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);
    let mut out = GradientMap::default();
    for t in order.iter().rev() {
        let Some(grad) = pending.remove(&t.id()) else { continue };
        match &t.0.node {
            Some(node) => {
                out.stats.nodes_visited += 1;
                if node.branch == Branch::Frozen {
                    out.stats.frozen_nodes_visited += 1;
                }
                let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                let ctx = BackwardCtx { grad: &grad, saved: &node.saved, needs: &needs };
                let grads = (node.backward)(&ctx);
                debug_assert_eq!(grads.len(), node.parents.len(), "{}", node.op);
                for (parent, g) in node.parents.iter().zip(grads) {
                    let (Some(p), Some(g)) = (parent, g) else { continue };
                    debug_assert_eq!(g.len(), p.numel(), "{} gradient size", node.op);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.id(), g);
                        }
                    }
                }
            }
            None if t.requires_grad() => {
                out.grads.insert(t.id(), Tensor::new(t.shape(), grad)?);
            }
            None => {}
        }
    }
    Ok(out)
}
