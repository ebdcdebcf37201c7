use std::sync::Arc;

use crate::autodiff::tensor::{numel_of, OpBuilder, Tensor};
use crate::autodiff::{Result, TensorError};

/// Padding rule for [`pad`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Repeat the edge element.
    Replicate,
}

/// Reinterpret the data with a new shape; shares storage.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().any(|&d| d == 0) || numel_of(shape) != a.numel() {
        return Err(TensorError::Shape {
            op: "reshape",
            detail: format!("cannot view {:?} as {shape:?}", a.shape()),
        });
    }
    let op = OpBuilder::new("reshape", &[a]);
    let buf = Arc::clone(&a.0.buf);
    if !op.tracking() {
        return Ok(Tensor::raw(shape.to_vec(), buf, false, false));
    }
    Ok(op.finish(shape.to_vec(), buf, Vec::new(), 0, |ctx| vec![Some(ctx.grad.to_vec())]))
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        let mut off = base;
        for _ in 0..last_len {
            out.push(data[off]);
            off += last_stride;
        }
        // odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Reorder axes: output axis `i` is input axis `axes[i]`.
pub fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    let valid = axes.len() == rank
        && axes.iter().all(|&ax| ax < rank && !std::mem::replace(&mut seen[ax], true));
    if !valid {
        return Err(TensorError::Shape {
            op: "permute",
            detail: format!("{axes:?} is not a permutation of the axes of {:?}", a.shape()),
        });
    }
    let shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let op = OpBuilder::new("permute", &[a]);
    let data = (!op.meta()).then(|| permute_data(a.data(), a.shape(), axes));
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let mut inverse = vec![0; rank];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    let out_shape = shape.clone();
    Ok(op.finish_data(shape, data, Vec::new(), 0, move |ctx| {
        vec![Some(permute_data(ctx.grad, &out_shape, &inverse))]
    }))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gather along `axis`; `None` entries produce zeros.
fn gather(
    name: &'static str,
    a: &Tensor,
    axis: usize,
    indices: Vec<Option<usize>>,
) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(TensorError::Shape {
            op: name,
            detail: format!("axis {axis} out of range for {:?}", a.shape()),
        });
    }
    let (outer, len, inner) = split_axis(a.shape(), axis);
    if let Some(bad) = indices.iter().flatten().find(|&&i| i >= len) {
        return Err(TensorError::Shape {
            op: name,
            detail: format!("index {bad} out of range for axis {axis} of {:?}", a.shape()),
        });
    }
    if indices.is_empty() {
        return Err(TensorError::Shape {
            op: name,
            detail: "selection along axis is empty".into(),
        });
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = indices.len();
    let op = OpBuilder::new(name, &[a]);
    let count = indices.len();
    let data = (!op.meta()).then(|| {
        let d = a.data();
        let mut out = vec![0.0; outer * count * inner];
        for o in 0..outer {
            for (j, idx) in indices.iter().enumerate() {
                if let Some(i) = idx {
                    let src = &d[(o * len + i) * inner..(o * len + i + 1) * inner];
                    out[(o * count + j) * inner..(o * count + j + 1) * inner]
                        .copy_from_slice(src);
                }
            }
        }
        out
    });
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    Ok(op.finish_data(shape, data, Vec::new(), 0, move |ctx| {
        let mut g = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for (j, idx) in indices.iter().enumerate() {
                if let Some(i) = idx {
                    let src = &ctx.grad[(o * count + j) * inner..(o * count + j + 1) * inner];
                    let dst = &mut g[(o * len + i) * inner..(o * len + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        vec![Some(g)]
    }))
}

/// Select entries `indices` along `axis` (repeats allowed).
pub fn index_select(a: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    gather("index_select", a, axis, indices.iter().copied().map(Some).collect())
}

/// Contiguous slice `start..start+len` along `axis`.
pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let extent = a.shape().get(axis).copied().unwrap_or(0);
    if len == 0 || start + len > extent {
        return Err(TensorError::Shape {
            op: "narrow",
            detail: format!(
                "range {start}..{} outside axis {axis} of {:?}",
                start + len,
                a.shape()
            ),
        });
    }
    gather("narrow", a, axis, (start..start + len).map(Some).collect())
}

/// `out[i] = a[i + offset]` along `axis`, zero where that falls outside.
pub fn shift(a: &Tensor, axis: usize, offset: isize) -> Result<Tensor> {
    let extent = a.shape().get(axis).copied().ok_or_else(|| TensorError::Shape {
        op: "shift",
        detail: format!("axis {axis} out of range for {:?}", a.shape()),
    })? as isize;
    let indices = (0..extent)
        .map(|i| (0..extent).contains(&(i + offset)).then(|| (i + offset) as usize))
        .collect();
    gather("shift", a, axis, indices)
}

/// Extend `axis` by `before` and `after` entries.
pub fn pad(a: &Tensor, axis: usize, before: usize, after: usize, mode: PadMode) -> Result<Tensor> {
    let extent = a.shape().get(axis).copied().ok_or_else(|| TensorError::Shape {
        op: "pad",
        detail: format!("axis {axis} out of range for {:?}", a.shape()),
    })?;
    let indices = (0..before + extent + after)
        .map(|p| {
            let i = p as isize - before as isize;
            match mode {
                PadMode::Zero => (0..extent as isize).contains(&i).then_some(i as usize),
                PadMode::Replicate => Some(i.clamp(0, extent as isize - 1) as usize),
            }
        })
        .collect();
    gather("pad", a, axis, indices)
}

/// Join tensors along `axis`; all other extents must agree.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| TensorError::Shape {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::Shape {
            op: "concat",
            detail: format!("axis {axis} out of range for {:?}", first.shape()),
        });
    }
    for t in tensors {
        let ok = t.rank() == rank
            && (0..rank).all(|i| i == axis || t.shape()[i] == first.shape()[i]);
        if !ok {
            return Err(TensorError::Shape {
                op: "concat",
                detail: format!("{:?} does not match {:?} off axis {axis}", t.shape(), first.shape()),
            });
        }
    }
    let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let op = OpBuilder::new("concat", &refs);
    let data = (!op.meta()).then(|| {
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &e) in tensors.iter().zip(&extents) {
                out.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        out
    });
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    Ok(op.finish_data(shape, data, Vec::new(), 0, move |ctx| {
        let mut grads: Vec<Vec<f64>> =
            extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (g, &e) in grads.iter_mut().zip(&extents) {
                g.extend_from_slice(&ctx.grad[off..off + e * inner]);
                off += e * inner;
            }
        }
        grads
            .into_iter()
            .zip(ctx.needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let a = Tensor::new(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let t = permute(&a, &[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![0., 3., 1., 4., 2., 5.]);
        assert!(permute(&a, &[0, 0]).is_err());
    }

    #[test]
    fn pad_modes() {
        let a = Tensor::new(&[3], vec![1., 2., 3.]).unwrap();
        assert_eq!(pad(&a, 0, 1, 2, PadMode::Zero).unwrap().to_vec(), vec![0., 1., 2., 3., 0., 0.]);
        assert_eq!(
            pad(&a, 0, 2, 1, PadMode::Replicate).unwrap().to_vec(),
            vec![1., 1., 1., 2., 3., 3.]
        );
    }

    #[test]
    fn concat_and_narrow_inverse() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64);
        let c = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(narrow(&c, 1, 2, 1).unwrap().to_vec(), b.to_vec());
        assert!(narrow(&c, 1, 2, 2).is_err());
    }
}
