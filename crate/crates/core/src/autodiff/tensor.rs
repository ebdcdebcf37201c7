//! Dense tensor handle and the reverse-mode graph node attached to it.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::context::{self, Branch};
use super::{Result, TensorError};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_BUFFER_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a tensor. Parameters keep their id across optimizer
/// updates, so it doubles as the parameter identity in a [`GradientMap`].
///
/// [`GradientMap`]: super::GradientMap
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// Backing storage. `data` is `None` for meta tensors, which carry a shape
/// but no numbers; they let the profiler build full-size graphs for free.
pub(crate) struct Buffer {
    pub(crate) id: u64,
    pub(crate) data: Option<Vec<f64>>,
}

impl Buffer {
    pub(crate) fn new(data: Option<Vec<f64>>) -> Arc<Buffer> {
        Arc::new(Buffer {
            id: NEXT_BUFFER_ID.fetch_add(1, Ordering::Relaxed),
            data,
        })
    }
}

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub saved: &'a [Tensor],
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn =
    Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// A recorded operation. Only built when some input requires grad.
pub(crate) struct Node {
    pub(crate) op: &'static str,
    pub(crate) branch: Branch,
    /// One slot per input; `None` for inputs that do not require grad, so
    /// nothing upstream of a frozen input is kept alive or traversed.
    pub(crate) parents: Vec<Option<Tensor>>,
    /// Tensors held for the backward pass.
    pub(crate) saved: Vec<Tensor>,
    /// Bytes of non-tensor state held for backward (e.g. argmax indices).
    pub(crate) extra_bytes: usize,
    pub(crate) backward: BackwardFn,
}

pub(crate) struct Inner {
    pub(crate) id: TensorId,
    pub(crate) shape: Vec<usize>,
    pub(crate) buf: Arc<Buffer>,
    pub(crate) requires_grad: bool,
    pub(crate) is_param: bool,
    /// Branch active when the tensor was produced.
    pub(crate) origin: Branch,
    pub(crate) node: Option<Node>,
}

/// Immutable n-dimensional array of `f64` participating in a reverse-mode
/// differentiation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        if numel_of(shape) != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} holds {} elements but {} were given",
                    numel_of(shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor::raw(shape.to_vec(), Buffer::new(Some(data)), false, false))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::raw(Vec::new(), Buffer::new(Some(vec![v])), false, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::raw(shape.to_vec(), Buffer::new(Some(vec![v; numel_of(shape)])), false, false)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Tensor {
        let data = (0..numel_of(shape)).map(f).collect();
        Tensor::raw(shape.to_vec(), Buffer::new(Some(data)), false, false)
    }

    /// Shape-only tensor; every op on it yields another meta tensor.
    pub fn meta(shape: &[usize]) -> Tensor {
        Tensor::raw(shape.to_vec(), Buffer::new(None), false, false)
    }

    /// Trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor::raw(t.0.shape.clone(), t.0.buf.clone(), true, true))
    }

    /// Leaf that belongs to a model but never receives gradients.
    pub fn frozen_parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor::raw(t.0.shape.clone(), t.0.buf.clone(), false, true))
    }

    /// Shape-only model parameter, for graph census at scales where the
    /// numbers themselves are not needed.
    pub fn meta_parameter(shape: &[usize], requires_grad: bool) -> Tensor {
        Tensor::raw(shape.to_vec(), Buffer::new(None), requires_grad, true)
    }

    pub(crate) fn raw(
        shape: Vec<usize>,
        buf: Arc<Buffer>,
        requires_grad: bool,
        is_param: bool,
    ) -> Tensor {
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape,
            buf,
            requires_grad,
            is_param,
            origin: context::current_branch(),
            node: None,
        }))
    }

    pub(crate) fn from_node(shape: Vec<usize>, buf: Arc<Buffer>, node: Node) -> Tensor {
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape,
            buf,
            requires_grad: true,
            is_param: false,
            origin: node.branch,
            node: Some(node),
        }))
    }

    /// Same data and shape, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape: self.0.shape.clone(),
            buf: self.0.buf.clone(),
            requires_grad: false,
            is_param: false,
            origin: self.0.origin,
            node: None,
        }))
    }

    /// A leaf copy of this tensor that requires grad (for gradient checks and
    /// probing input sensitivities).
    pub fn requiring_grad(&self) -> Tensor {
        Tensor::raw(self.0.shape.clone(), self.0.buf.clone(), true, false)
    }

    /// Leaf with the same identity, parameter status, and grad flag but new
    /// contents. This is how optimizers update parameters in place.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != self.numel() {
            return Err(TensorError::Shape {
                op: "with_data",
                detail: format!("expected {} elements, got {}", self.numel(), data.len()),
            });
        }
        Ok(Tensor(Arc::new(Inner {
            id: self.0.id,
            shape: self.0.shape.clone(),
            buf: Buffer::new(Some(data)),
            requires_grad: self.0.requires_grad,
            is_param: self.0.is_param,
            origin: self.0.origin,
            node: None,
        })))
    }

    /// Same leaf identity with the grad flag switched.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Inner {
            id: self.0.id,
            shape: self.0.shape.clone(),
            buf: self.0.buf.clone(),
            requires_grad,
            is_param: self.0.is_param,
            origin: self.0.origin,
            node: None,
        }))
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_param(&self) -> bool {
        self.0.is_param
    }

    pub fn is_meta(&self) -> bool {
        self.0.buf.data.is_none()
    }

    pub fn origin(&self) -> Branch {
        self.0.origin
    }

    pub fn has_node(&self) -> bool {
        self.0.node.is_some()
    }

    pub(crate) fn buffer_id(&self) -> u64 {
        self.0.buf.id
    }

    /// Element data. Panics on meta tensors.
    pub fn data(&self) -> &[f64] {
        self.0
            .buf
            .data
            .as_deref()
            .expect("meta tensor has no data")
    }

    pub(crate) fn data_opt(&self) -> Option<&[f64]> {
        self.0.buf.data.as_deref()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Shape {
                op: "item",
                detail: format!("expected one element, shape is {:?}", self.shape()),
            });
        }
        self.data_opt()
            .map(|d| d[0])
            .ok_or(TensorError::Meta("item"))
    }

    pub fn all_finite(&self) -> bool {
        self.data_opt().map_or(true, |d| d.iter().all(|v| v.is_finite()))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("id", &self.0.id.0).field("shape", &self.0.shape);
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        match self.data_opt() {
            Some(d) if d.len() <= 8 => s.field("data", &d),
            Some(d) => s.field("data", &format_args!("[{} values]", d.len())),
            None => s.field("data", &"meta"),
        };
        s.finish()
    }
}

/// Bookkeeping shared by every primitive: decides whether the op is recorded
/// and assembles the node when it is.
pub(crate) struct OpBuilder {
    name: &'static str,
    parents: Vec<Option<Tensor>>,
    tracking: bool,
    meta: bool,
}

impl OpBuilder {
    pub(crate) fn new(name: &'static str, inputs: &[&Tensor]) -> OpBuilder {
        let tracking =
            context::grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let meta = inputs.iter().any(|t| t.is_meta());
        let parents = if tracking {
            inputs
                .iter()
                .map(|t| t.requires_grad().then(|| (*t).clone()))
                .collect()
        } else {
            Vec::new()
        };
        OpBuilder { name, parents, tracking, meta }
    }

    pub(crate) fn tracking(&self) -> bool {
        self.tracking
    }

    pub(crate) fn meta(&self) -> bool {
        self.meta
    }

    /// Whether input `i` will receive a gradient.
    pub(crate) fn needs(&self, i: usize) -> bool {
        self.tracking && self.parents.get(i).map_or(false, Option::is_some)
    }

    pub(crate) fn untracked(self, shape: Vec<usize>, data: Option<Vec<f64>>) -> Tensor {
        Tensor::raw(shape, Buffer::new(data), false, false)
    }

    pub(crate) fn finish(
        self,
        shape: Vec<usize>,
        buf: Arc<Buffer>,
        saved: Vec<Tensor>,
        extra_bytes: usize,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Tensor {
        debug_assert!(self.tracking);
        let node = Node {
            op: self.name,
            branch: context::current_branch(),
            parents: self.parents,
            saved,
            extra_bytes,
            backward: Box::new(backward),
        };
        Tensor::from_node(shape, buf, node)
    }

    /// Finish with a fresh buffer holding `data`.
    pub(crate) fn finish_data(
        self,
        shape: Vec<usize>,
        data: Option<Vec<f64>>,
        saved: Vec<Tensor>,
        extra_bytes: usize,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Tensor {
        self.finish(shape, Buffer::new(data), saved, extra_bytes, backward)
    }
}
