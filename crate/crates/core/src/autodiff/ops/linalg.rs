use crate::autodiff::context;
use crate::autodiff::tensor::{OpBuilder, Tensor};
use crate::autodiff::{Result, TensorError};

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Copy, Clone)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        MatRef { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let rs = self.cols as isize;
        if self.transposed {
            (1, rs)
        } else {
            (rs, 1)
        }
    }
}

/// `c += a · b` (or `c = a · b` when `accumulate` is false).
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: all slices are bounds-checked above against the logical shapes
    // and strides derived from them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[m×k] · [k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(TensorError::Shape {
            op: "matmul",
            detail: format!("cannot multiply {sa:?} by {sb:?}"),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    context::add_flops(2 * (m * n * k) as u64);
    let op = OpBuilder::new("matmul", &[a, b]);
    let data = (!op.meta()).then(|| {
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, false);
        out
    });
    let shape = vec![m, n];
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let (need_a, need_b) = (op.needs(0), op.needs(1));
    // dA needs B, dB needs A; keep only what is required
    let mut saved = Vec::new();
    if need_a {
        saved.push(b.clone());
    }
    if need_b {
        saved.push(a.clone());
    }
    Ok(op.finish_data(shape, data, saved, 0, move |ctx| {
        let g = MatRef::new(ctx.grad, m, n);
        let ga = need_a.then(|| {
            let mut out = vec![0.0; m * k];
            gemm(g, MatRef::new(ctx.saved[0].data(), k, n).t(), &mut out, false);
            out
        });
        let gb = need_b.then(|| {
            let ad = ctx.saved[usize::from(need_a)].data();
            let mut out = vec![0.0; k * n];
            gemm(MatRef::new(ad, m, k).t(), g, &mut out, false);
            out
        });
        vec![ga, gb]
    }))
}

/// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`; with `transpose_b` the
/// right operand is `[B×n×k]` and is used transposed.
pub fn bmm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let bad = || TensorError::Shape {
        op: "bmm",
        detail: format!("cannot batch-multiply {sa:?} by {sb:?} (transpose_b={transpose_b})"),
    };
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(bad());
    }
    let (batch, m, k) = (sa[0], sa[1], sa[2]);
    let (bk, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if bk != k {
        return Err(bad());
    }
    context::add_flops(2 * (batch * m * n * k) as u64);
    let (rb, cb) = (sb[1], sb[2]);
    fn view<'a>(d: &'a [f64], i: usize, rb: usize, cb: usize, transpose: bool) -> MatRef<'a> {
        let v = MatRef::new(&d[i * rb * cb..(i + 1) * rb * cb], rb, cb);
        if transpose {
            v.t()
        } else {
            v
        }
    }
    let op = OpBuilder::new("bmm", &[a, b]);
    let data = (!op.meta()).then(|| {
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k),
                view(bd, i, rb, cb, transpose_b),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        out
    });
    let shape = vec![batch, m, n];
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let (need_a, need_b) = (op.needs(0), op.needs(1));
    let mut saved = Vec::new();
    if need_a {
        saved.push(b.clone());
    }
    if need_b {
        saved.push(a.clone());
    }
    Ok(op.finish_data(shape, data, saved, 0, move |ctx| {
        let ga = need_a.then(|| {
            let bd = ctx.saved[0].data();
            let mut out = vec![0.0; batch * m * k];
            for i in 0..batch {
                let g = MatRef::new(&ctx.grad[i * m * n..(i + 1) * m * n], m, n);
                gemm(g, view(bd, i, rb, cb, transpose_b).t(), &mut out[i * m * k..(i + 1) * m * k], false);
            }
            out
        });
        let gb = need_b.then(|| {
            let ad = ctx.saved[usize::from(need_a)].data();
            let mut out = vec![0.0; batch * rb * cb];
            for i in 0..batch {
                let g = MatRef::new(&ctx.grad[i * m * n..(i + 1) * m * n], m, n);
                let av = MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k);
                let dst = &mut out[i * rb * cb..(i + 1) * rb * cb];
                if transpose_b {
                    // B is [n×k]: dB = gᵀ · A
                    gemm(g.t(), av, dst, false);
                } else {
                    gemm(av.t(), g, dst, false);
                }
            }
            out
        });
        vec![ga, gb]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_rule() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 4]);
        assert_eq!(matmul(&a, &b).unwrap().shape(), &[2, 4]);
        assert!(matches!(matmul(&b, &a), Err(TensorError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn matmul_values() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![-1.0, -1.0]);
    }

    #[test]
    fn bmm_transposed_matches_explicit() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.11).cos());
        let c = bmm(&a, &b, true).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let (ad, bd, cd) = (a.data(), b.data(), c.data());
        for bt in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let want: f64 =
                        (0..4).map(|p| ad[bt * 12 + i * 4 + p] * bd[bt * 20 + j * 4 + p]).sum();
                    assert!((cd[bt * 15 + i * 5 + j] - want).abs() < 1e-12);
                }
            }
        }
    }
}
