//! 3-D convolution and max-pooling over single `[C×D×H×W]` volumes. 2-D
//! convolution is the `D = 1`, `kd = 1` special case.

use crate::autodiff::context;
use crate::autodiff::ops::linalg::{gemm, MatRef};
use crate::autodiff::tensor::{OpBuilder, Tensor};
use crate::autodiff::{Result, TensorError};

/// How max-pooling treats positions outside the input.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PoolPadding {
    /// Out-of-range positions never win.
    NegInf,
    /// Out-of-range positions repeat the nearest edge element.
    Replicate,
}

#[derive(Copy, Clone, Debug)]
struct Geometry {
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(
        op: &'static str,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Geometry> {
        let mut output = [0; 3];
        for i in 0..3 {
            if kernel[i] == 0 || stride[i] == 0 || input[i] + 2 * padding[i] < kernel[i] {
                return Err(TensorError::Shape {
                    op,
                    detail: format!(
                        "input {input:?} kernel {kernel:?} stride {stride:?} padding {padding:?} \
                         give an empty output"
                    ),
                });
            }
            output[i] = (input[i] + 2 * padding[i] - kernel[i]) / stride[i] + 1;
        }
        Ok(Geometry { input, kernel, stride, padding, output })
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kvol() == 1 && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Input coordinate along axis `ax` for output `o` and kernel offset `k`.
    fn coord(&self, ax: usize, o: usize, k: usize) -> isize {
        (o * self.stride[ax] + k) as isize - self.padding[ax] as isize
    }
}

fn volume(op: &'static str, x: &Tensor) -> Result<(usize, [usize; 3])> {
    match x.shape() {
        &[c, d, h, w] => Ok((c, [d, h, w])),
        s => Err(TensorError::Shape {
            op,
            detail: format!("expected a [C×D×H×W] volume, got {s:?}"),
        }),
    }
}

fn im2col(x: &[f64], channels: usize, g: &Geometry) -> Vec<f64> {
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [id, ih, iw] = g.input;
    let l = g.out_len();
    let mut cols = vec![0.0; channels * g.kvol() * l];
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * g.in_len()..(c + 1) * g.in_len()];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let mut col = 0;
                    for zo in 0..od {
                        let z = g.coord(0, zo, a);
                        for yo in 0..oh {
                            let y = g.coord(1, yo, b);
                            for xo in 0..ow {
                                let xx = g.coord(2, xo, e);
                                if z >= 0
                                    && (z as usize) < id
                                    && y >= 0
                                    && (y as usize) < ih
                                    && xx >= 0
                                    && (xx as usize) < iw
                                {
                                    dst[col] = xc[(z as usize * ih + y as usize) * iw + xx as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, g: &Geometry) -> Vec<f64> {
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [id, ih, iw] = g.input;
    let l = g.out_len();
    let mut x = vec![0.0; channels * g.in_len()];
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * g.in_len()..(c + 1) * g.in_len()];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * l..(row + 1) * l];
                    let mut col = 0;
                    for zo in 0..od {
                        let z = g.coord(0, zo, a);
                        for yo in 0..oh {
                            let y = g.coord(1, yo, b);
                            for xo in 0..ow {
                                let xx = g.coord(2, xo, e);
                                if z >= 0
                                    && (z as usize) < id
                                    && y >= 0
                                    && (y as usize) < ih
                                    && xx >= 0
                                    && (xx as usize) < iw
                                {
                                    xc[(z as usize * ih + y as usize) * iw + xx as usize] += src[col];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// Cross-correlation of `x [Ci×D×H×W]` with `weight [Co×Ci×kd×kh×kw]`, zero
/// padding, optional per-output-channel bias.
pub fn conv3d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor> {
    let (ci, input) = volume("conv3d", x)?;
    let (co, kernel) = match weight.shape() {
        &[o, i, kd, kh, kw] if i == ci => (o, [kd, kh, kw]),
        s => {
            return Err(TensorError::Shape {
                op: "conv3d",
                detail: format!("weight {s:?} does not take {ci} input channels"),
            })
        }
    };
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(TensorError::Shape {
                op: "conv3d",
                detail: format!("bias {:?} does not match {co} output channels", b.shape()),
            });
        }
    }
    let g = Geometry::new("conv3d", input, kernel, stride, padding)?;
    let k = ci * g.kvol();
    let l = g.out_len();
    context::add_flops(2 * (co * k * l) as u64);

    let dummy = Tensor::meta(&[co]);
    let op = OpBuilder::new("conv3d", &[x, weight, bias.unwrap_or(&dummy)]);
    let meta = x.is_meta() || weight.is_meta() || bias.map_or(false, Tensor::is_meta);
    let data = (!meta).then(|| {
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            x.data()
        } else {
            owned = im2col(x.data(), ci, &g);
            &owned
        };
        let mut out = vec![0.0; co * l];
        gemm(MatRef::new(weight.data(), co, k), MatRef::new(cols, k, l), &mut out, false);
        if let Some(b) = bias {
            for (row, bv) in out.chunks_exact_mut(l).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    });
    let shape = vec![co, g.output[0], g.output[1], g.output[2]];
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let (need_x, need_w, need_b) = (op.needs(0), op.needs(1), op.needs(2));
    // saved layout: [weight if dx needed, input if dW needed]
    let mut saved = Vec::new();
    if need_x {
        saved.push(weight.clone());
    }
    if need_w {
        saved.push(x.clone());
    }
    Ok(op.finish_data(shape, data, saved, 0, move |ctx| {
        let gy = MatRef::new(ctx.grad, co, l);
        let gx = need_x.then(|| {
            let w = MatRef::new(ctx.saved[0].data(), co, k);
            let mut dcols = vec![0.0; k * l];
            gemm(w.t(), gy, &mut dcols, false);
            if g.is_pointwise() {
                dcols
            } else {
                col2im(&dcols, ci, &g)
            }
        });
        let gw = need_w.then(|| {
            let xd = ctx.saved[usize::from(need_x)].data();
            let owned;
            let cols: &[f64] = if g.is_pointwise() {
                xd
            } else {
                owned = im2col(xd, ci, &g);
                &owned
            };
            let mut dw = vec![0.0; co * k];
            gemm(gy, MatRef::new(cols, k, l).t(), &mut dw, false);
            dw
        });
        let gb = need_b.then(|| ctx.grad.chunks_exact(l).map(|r| r.iter().sum()).collect());
        vec![gx, gw, gb]
    }))
}

/// Max-pooling over `x [C×D×H×W]`. Under ties the gradient goes to the
/// first maximal element in window scan order, which is the lowest linear
/// index.
pub fn maxpool3d(
    x: &Tensor,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    mode: PoolPadding,
) -> Result<Tensor> {
    let (channels, input) = volume("maxpool3d", x)?;
    let g = Geometry::new("maxpool3d", input, kernel, stride, padding)?;
    if mode == PoolPadding::NegInf && (0..3).any(|i| padding[i] >= kernel[i]) {
        return Err(TensorError::Shape {
            op: "maxpool3d",
            detail: format!("padding {padding:?} must be smaller than kernel {kernel:?}"),
        });
    }
    let op = OpBuilder::new("maxpool3d", &[x]);
    let l = g.out_len();
    let mut argmax: Vec<usize> = Vec::new();
    let data = (!op.meta()).then(|| {
        let d = x.data();
        let [od, oh, ow] = g.output;
        let [id, ih, iw] = g.input;
        let clamp = |v: isize, n: usize| -> Option<usize> {
            match mode {
                PoolPadding::Replicate => Some(v.clamp(0, n as isize - 1) as usize),
                PoolPadding::NegInf => (v >= 0 && (v as usize) < n).then_some(v as usize),
            }
        };
        let mut out = Vec::with_capacity(channels * l);
        argmax.reserve(channels * l);
        for c in 0..channels {
            let base = c * g.in_len();
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for a in 0..kernel[0] {
                            let Some(z) = clamp(g.coord(0, zo, a), id) else { continue };
                            for b in 0..kernel[1] {
                                let Some(y) = clamp(g.coord(1, yo, b), ih) else { continue };
                                for e in 0..kernel[2] {
                                    let Some(xx) = clamp(g.coord(2, xo, e), iw) else { continue };
                                    let idx = base + (z * ih + y) * iw + xx;
                                    if best_idx == usize::MAX || d[idx] > best {
                                        best = d[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        out
    });
    let shape = vec![channels, g.output[0], g.output[1], g.output[2]];
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let n_in = x.numel();
    let extra = channels * l * std::mem::size_of::<usize>();
    Ok(op.finish_data(shape, data, Vec::new(), extra, move |ctx| {
        let mut gx = vec![0.0; n_in];
        for (gv, &i) in ctx.grad.iter().zip(&argmax) {
            gx[i] += gv;
        }
        vec![Some(gx)]
    }))
}
