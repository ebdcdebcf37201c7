use crate::autodiff::tensor::{OpBuilder, Tensor};
use crate::autodiff::{Result, TensorError};

fn scaled_sum_all(name: &'static str, a: &Tensor, factor: f64) -> Result<Tensor> {
    let op = OpBuilder::new(name, &[a]);
    let data = (!op.meta()).then(|| vec![a.data().iter().sum::<f64>() * factor]);
    if !op.tracking() {
        return Ok(op.untracked(Vec::new(), data));
    }
    let n = a.numel();
    Ok(op.finish_data(Vec::new(), data, Vec::new(), 0, move |ctx| {
        vec![Some(vec![ctx.grad[0] * factor; n])]
    }))
}

/// Sum of all elements, as a scalar.
pub fn sum(a: &Tensor) -> Result<Tensor> {
    scaled_sum_all("sum", a, 1.0)
}

/// Mean of all elements, as a scalar.
pub fn mean(a: &Tensor) -> Result<Tensor> {
    scaled_sum_all("mean", a, 1.0 / a.numel() as f64)
}

/// Mean over one axis, which is removed from the shape.
pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(TensorError::Shape {
            op: "mean_axis",
            detail: format!("axis {axis} out of range for {:?}", a.shape()),
        });
    }
    let shape_in = a.shape();
    let outer: usize = shape_in[..axis].iter().product();
    let len = shape_in[axis];
    let inner: usize = shape_in[axis + 1..].iter().product();
    let mut shape = shape_in.to_vec();
    shape.remove(axis);
    let inv = 1.0 / len as f64;
    let op = OpBuilder::new("mean_axis", &[a]);
    let data = (!op.meta()).then(|| {
        let d = a.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x += y;
                }
            }
            dst.iter_mut().for_each(|x| *x *= inv);
        }
        out
    });
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    Ok(op.finish_data(shape, data, Vec::new(), 0, move |ctx| {
        let mut g = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &ctx.grad[o * inner..(o + 1) * inner];
            for l in 0..len {
                let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x = y * inv;
                }
            }
        }
        vec![Some(g)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_axis_removes_axis() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let m0 = mean_axis(&a, 0).unwrap();
        assert_eq!(m0.shape(), &[3]);
        assert_eq!(m0.to_vec(), vec![2.5, 3.5, 4.5]);
        assert_eq!(mean_axis(&a, 1).unwrap().to_vec(), vec![2.0, 5.0]);
        assert_eq!(sum(&a).unwrap().item().unwrap(), 21.0);
        assert_eq!(mean(&a).unwrap().item().unwrap(), 3.5);
    }
}
