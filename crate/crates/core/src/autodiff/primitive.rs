//! Name-based dispatch over the primitive set, for callers that describe an
//! operation as data (kind + inputs + attributes).

use std::collections::BTreeMap;
use std::str::FromStr;

use super::ops::{self, PadMode, PoolPadding};
use super::tensor::Tensor;
use super::{Result, TensorError};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Matmul,
    Bmm,
    Conv3d,
    MaxPool3d,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Gelu,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    Pad,
    Permute,
    Reshape,
    Narrow,
    IndexSelect,
    Mean,
    MeanAxis,
    Sum,
}

impl FromStr for PrimitiveKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        use PrimitiveKind::*;
        Ok(match s {
            "matmul" => Matmul,
            "bmm" => Bmm,
            "conv3d" | "conv2d" => Conv3d,
            "maxpool3d" => MaxPool3d,
            "layer_norm" => LayerNorm,
            "softmax" => Softmax,
            "log_softmax" => LogSoftmax,
            "gelu" => Gelu,
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "scale" => Scale,
            "concat" => Concat,
            "pad" => Pad,
            "permute" => Permute,
            "reshape" => Reshape,
            "narrow" => Narrow,
            "index_select" => IndexSelect,
            "mean" => Mean,
            "mean_axis" => MeanAxis,
            "sum" => Sum,
            other => return Err(TensorError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(i64),
    Ints(Vec<i64>),
    Float(f64),
    Bool(bool),
    Str(String),
}

pub type Attrs = BTreeMap<String, Attr>;

fn attr<'a>(attrs: &'a Attrs, key: &str) -> Result<&'a Attr> {
    attrs.get(key).ok_or_else(|| TensorError::Attr(format!("missing attribute `{key}`")))
}

fn usize_of(v: i64, key: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| TensorError::Attr(format!("`{key}` must be non-negative, got {v}")))
}

fn get_usize(attrs: &Attrs, key: &str) -> Result<usize> {
    match attr(attrs, key)? {
        Attr::Int(v) => usize_of(*v, key),
        other => Err(TensorError::Attr(format!("`{key}` must be an integer, got {other:?}"))),
    }
}

fn get_usizes(attrs: &Attrs, key: &str) -> Result<Vec<usize>> {
    match attr(attrs, key)? {
        Attr::Ints(v) => v.iter().map(|&x| usize_of(x, key)).collect(),
        Attr::Int(v) => Ok(vec![usize_of(*v, key)?]),
        other => Err(TensorError::Attr(format!("`{key}` must be integers, got {other:?}"))),
    }
}

fn get_triple(attrs: &Attrs, key: &str, default: usize) -> Result<[usize; 3]> {
    if !attrs.contains_key(key) {
        return Ok([default; 3]);
    }
    let v = get_usizes(attrs, key)?;
    match v.as_slice() {
        &[a] => Ok([a; 3]),
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(TensorError::Attr(format!("`{key}` needs 1 or 3 values, got {v:?}"))),
    }
}

fn get_f64(attrs: &Attrs, key: &str, default: Option<f64>) -> Result<f64> {
    match (attrs.get(key), default) {
        (Some(Attr::Float(v)), _) => Ok(*v),
        (Some(Attr::Int(v)), _) => Ok(*v as f64),
        (Some(other), _) => Err(TensorError::Attr(format!("`{key}` must be a number, got {other:?}"))),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(TensorError::Attr(format!("missing attribute `{key}`"))),
    }
}

fn get_str<'a>(attrs: &'a Attrs, key: &str, default: &'a str) -> Result<&'a str> {
    match attrs.get(key) {
        Some(Attr::Str(s)) => Ok(s),
        Some(other) => Err(TensorError::Attr(format!("`{key}` must be a string, got {other:?}"))),
        None => Ok(default),
    }
}

fn arity(kind: PrimitiveKind, inputs: &[Tensor], range: std::ops::RangeInclusive<usize>) -> Result<()> {
    if range.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(TensorError::Attr(format!(
            "{kind:?} takes {}..={} inputs, got {}",
            range.start(),
            range.end(),
            inputs.len()
        )))
    }
}

/// Run one primitive by kind. Attribute names follow the typed functions in
/// [`ops`]: `axis`, `axes`, `shape`, `start`, `len`, `indices`, `before`,
/// `after`, `mode`, `kernel`, `stride`, `padding`, `eps`, `factor`,
/// `transpose_b`.
pub fn primitive_forward(kind: PrimitiveKind, inputs: &[Tensor], attrs: &Attrs) -> Result<Tensor> {
    use PrimitiveKind::*;
    match kind {
        Matmul => {
            arity(kind, inputs, 2..=2)?;
            ops::matmul(&inputs[0], &inputs[1])
        }
        Bmm => {
            arity(kind, inputs, 2..=2)?;
            let tb = matches!(attrs.get("transpose_b"), Some(Attr::Bool(true)));
            ops::bmm(&inputs[0], &inputs[1], tb)
        }
        Conv3d => {
            arity(kind, inputs, 2..=3)?;
            ops::conv3d(
                &inputs[0],
                &inputs[1],
                inputs.get(2),
                get_triple(attrs, "stride", 1)?,
                get_triple(attrs, "padding", 0)?,
            )
        }
        MaxPool3d => {
            arity(kind, inputs, 1..=1)?;
            let kernel = get_triple(attrs, "kernel", 1)?;
            let mode = match get_str(attrs, "mode", "neg_inf")? {
                "replicate" => PoolPadding::Replicate,
                "neg_inf" => PoolPadding::NegInf,
                m => return Err(TensorError::Attr(format!("unknown pool padding `{m}`"))),
            };
            ops::maxpool3d(
                &inputs[0],
                kernel,
                get_triple(attrs, "stride", 1)?,
                get_triple(attrs, "padding", 0)?,
                mode,
            )
        }
        LayerNorm => {
            arity(kind, inputs, 1..=3)?;
            ops::layer_norm(&inputs[0], inputs.get(1), inputs.get(2), get_f64(attrs, "eps", Some(1e-5))?)
        }
        Softmax => {
            arity(kind, inputs, 1..=1)?;
            ops::softmax(&inputs[0])
        }
        LogSoftmax => {
            arity(kind, inputs, 1..=1)?;
            ops::log_softmax(&inputs[0])
        }
        Gelu => {
            arity(kind, inputs, 1..=1)?;
            ops::gelu(&inputs[0])
        }
        Add | Sub | Mul => {
            arity(kind, inputs, 2..=2)?;
            match kind {
                Add => ops::add(&inputs[0], &inputs[1]),
                Sub => ops::sub(&inputs[0], &inputs[1]),
                _ => ops::mul(&inputs[0], &inputs[1]),
            }
        }
        Scale => {
            arity(kind, inputs, 1..=1)?;
            ops::scale(&inputs[0], get_f64(attrs, "factor", None)?)
        }
        Concat => {
            arity(kind, inputs, 1..=usize::MAX)?;
            ops::concat(inputs, get_usize(attrs, "axis")?)
        }
        Pad => {
            arity(kind, inputs, 1..=1)?;
            let mode = match get_str(attrs, "mode", "zero")? {
                "zero" => PadMode::Zero,
                "replicate" => PadMode::Replicate,
                m => return Err(TensorError::Attr(format!("unknown pad mode `{m}`"))),
            };
            ops::pad(
                &inputs[0],
                get_usize(attrs, "axis")?,
                get_usize(attrs, "before")?,
                get_usize(attrs, "after")?,
                mode,
            )
        }
        Permute => {
            arity(kind, inputs, 1..=1)?;
            ops::permute(&inputs[0], &get_usizes(attrs, "axes")?)
        }
        Reshape => {
            arity(kind, inputs, 1..=1)?;
            ops::reshape(&inputs[0], &get_usizes(attrs, "shape")?)
        }
        Narrow => {
            arity(kind, inputs, 1..=1)?;
            ops::narrow(
                &inputs[0],
                get_usize(attrs, "axis")?,
                get_usize(attrs, "start")?,
                get_usize(attrs, "len")?,
            )
        }
        IndexSelect => {
            arity(kind, inputs, 1..=1)?;
            ops::index_select(&inputs[0], get_usize(attrs, "axis")?, &get_usizes(attrs, "indices")?)
        }
        Mean => {
            arity(kind, inputs, 1..=1)?;
            ops::mean(&inputs[0])
        }
        MeanAxis => {
            arity(kind, inputs, 1..=1)?;
            ops::mean_axis(&inputs[0], get_usize(attrs, "axis")?)
        }
        Sum => {
            arity(kind, inputs, 1..=1)?;
            ops::sum(&inputs[0])
        }
    }
}
