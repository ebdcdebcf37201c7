use crate::autodiff::tensor::{OpBuilder, Tensor};
use crate::autodiff::{Result, TensorError};

/// `b` must equal `a` in shape or match a trailing suffix of it (broadcast
/// over the leading axes). Returns the number of repeats of `b`.
fn suffix_repeats(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(TensorError::Shape {
            op,
            detail: format!("rhs {sb:?} is not a trailing suffix of lhs {sa:?}"),
        });
    }
    Ok(a.numel() / b.numel())
}

fn reduce_repeats(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn binary(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    sign: f64,
) -> Result<Tensor> {
    suffix_repeats(name, a, b)?;
    let op = OpBuilder::new(name, &[a, b]);
    let inner = b.numel();
    let data = (!op.meta()).then(|| {
        let bd = b.data();
        let mut out = a.to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += sign * v;
            }
        }
        out
    });
    let shape = a.shape().to_vec();
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let broadcast = a.numel() != inner;
    Ok(op.finish_data(shape, data, Vec::new(), 0, move |ctx| {
        let ga = ctx.needs[0].then(|| ctx.grad.to_vec());
        let gb = ctx.needs[1].then(|| {
            let mut g = if broadcast {
                reduce_repeats(ctx.grad, inner)
            } else {
                ctx.grad.to_vec()
            };
            if sign != 1.0 {
                g.iter_mut().for_each(|v| *v *= sign);
            }
            g
        });
        vec![ga, gb]
    }))
}

/// Element-wise `a + b`, with `b` optionally broadcast over leading axes.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, 1.0)
}

/// Element-wise `a - b`, with `b` optionally broadcast over leading axes.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, -1.0)
}

/// Element-wise product, with `b` optionally broadcast over leading axes.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    suffix_repeats("mul", a, b)?;
    let op = OpBuilder::new("mul", &[a, b]);
    let inner = b.numel();
    let data = (!op.meta()).then(|| {
        let bd = b.data();
        let mut out = a.to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o *= v;
            }
        }
        out
    });
    let shape = a.shape().to_vec();
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    // slot 0 holds what the gradient of `a` needs (b), slot 1 the reverse
    let mut saved = Vec::new();
    let (need_a, need_b) = (op.needs(0), op.needs(1));
    if need_a {
        saved.push(b.clone());
    }
    if need_b {
        saved.push(a.clone());
    }
    let broadcast = a.numel() != inner;
    Ok(op.finish_data(shape, data, saved, 0, move |ctx| {
        let ga = need_a.then(|| {
            let bd = ctx.saved[0].data();
            let mut g = ctx.grad.to_vec();
            for chunk in g.chunks_exact_mut(inner) {
                for (o, v) in chunk.iter_mut().zip(bd) {
                    *o *= v;
                }
            }
            g
        });
        let gb = need_b.then(|| {
            let ad = ctx.saved[usize::from(need_a)].data();
            let prod: Vec<f64> = ctx.grad.iter().zip(ad).map(|(g, x)| g * x).collect();
            if broadcast {
                reduce_repeats(&prod, inner)
            } else {
                prod
            }
        });
        vec![ga, gb]
    }))
}

/// Multiply by a constant.
pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    let op = OpBuilder::new("scale", &[a]);
    let data = (!op.meta()).then(|| a.data().iter().map(|v| v * s).collect());
    let shape = a.shape().to_vec();
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    Ok(op.finish_data(shape, data, Vec::new(), 0, move |ctx| {
        vec![Some(ctx.grad.iter().map(|g| g * s).collect())]
    }))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// GELU, tanh approximation.
pub fn gelu(a: &Tensor) -> Result<Tensor> {
    let op = OpBuilder::new("gelu", &[a]);
    let data = (!op.meta()).then(|| a.data().iter().map(|&v| gelu_scalar(v)).collect());
    let shape = a.shape().to_vec();
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    Ok(op.finish_data(shape, data, vec![a.clone()], 0, |ctx| {
        let x = ctx.saved[0].data();
        vec![Some(
            ctx.grad
                .iter()
                .zip(x)
                .map(|(g, &v)| g * gelu_grad_scalar(v))
                .collect(),
        )]
    }))
}
