use crate::autodiff::tensor::{Buffer, OpBuilder, Tensor};
use crate::autodiff::{Result, TensorError};

fn last_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    a.shape().last().copied().ok_or_else(|| TensorError::Shape {
        op,
        detail: "needs at least one axis".into(),
    })
}

/// Softmax over the last axis.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let n = last_dim("softmax", a)?;
    let op = OpBuilder::new("softmax", &[a]);
    let data = (!op.meta()).then(|| {
        let mut out = a.to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        out
    });
    let shape = a.shape().to_vec();
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    // the backward pass needs the output itself
    let buf = Buffer::new(data);
    let y = Tensor::raw(shape.clone(), buf.clone(), false, false);
    Ok(op.finish(shape, buf, vec![y], 0, move |ctx| {
        let y = ctx.saved[0].data();
        let mut g = ctx.grad.to_vec();
        for (grow, yrow) in g.chunks_exact_mut(n).zip(y.chunks_exact(n)) {
            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
            for (gv, yv) in grow.iter_mut().zip(yrow) {
                *gv = yv * (*gv - dot);
            }
        }
        vec![Some(g)]
    }))
}

/// Numerically stable log-softmax over the last axis.
pub fn log_softmax(a: &Tensor) -> Result<Tensor> {
    let n = last_dim("log_softmax", a)?;
    let op = OpBuilder::new("log_softmax", &[a]);
    let data = (!op.meta()).then(|| {
        let mut out = a.to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        out
    });
    let shape = a.shape().to_vec();
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let buf = Buffer::new(data);
    let y = Tensor::raw(shape.clone(), buf.clone(), false, false);
    Ok(op.finish(shape, buf, vec![y], 0, move |ctx| {
        let y = ctx.saved[0].data();
        let mut g = ctx.grad.to_vec();
        for (grow, yrow) in g.chunks_exact_mut(n).zip(y.chunks_exact(n)) {
            let total: f64 = grow.iter().sum();
            for (gv, yv) in grow.iter_mut().zip(yrow) {
                *gv -= yv.exp() * total;
            }
        }
        vec![Some(g)]
    }))
}

/// Layer normalization over the last axis with optional affine parameters.
pub fn layer_norm(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f64,
) -> Result<Tensor> {
    let n = last_dim("layer_norm", x)?;
    for p in [gamma, beta].into_iter().flatten() {
        if p.shape() != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!("affine parameter {:?} does not match last axis {n}", p.shape()),
            });
        }
    }
    let dummy = Tensor::meta(&[n]);
    let g_in = gamma.unwrap_or(&dummy);
    let b_in = beta.unwrap_or(&dummy);
    let op = OpBuilder::new("layer_norm", &[x, g_in, b_in]);
    let rows = x.numel() / n;
    let meta = x.is_meta() || gamma.map_or(false, Tensor::is_meta) || beta.map_or(false, Tensor::is_meta);
    let mut xhat = Vec::new();
    let mut rstd = Vec::new();
    let data = (!meta).then(|| {
        let d = x.data();
        xhat = vec![0.0; d.len()];
        rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (h, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *h = (v - mu) * s;
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(n) {
            if let Some(g) = gamma {
                row.iter_mut().zip(g.data()).for_each(|(v, g)| *v *= g);
            }
            if let Some(b) = beta {
                row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
            }
        }
        out
    });
    let shape = x.shape().to_vec();
    if !op.tracking() {
        return Ok(op.untracked(shape, data));
    }
    let (need_x, need_g, need_b) = (op.needs(0), op.needs(1), op.needs(2));
    let has_gamma = gamma.is_some();
    // saved layout: [xhat?, rstd?, gamma?]
    let mut saved = Vec::new();
    let keep_xhat = need_x || need_g;
    if keep_xhat {
        let buf = Buffer::new((!meta).then(|| std::mem::take(&mut xhat)));
        saved.push(Tensor::raw(shape.clone(), buf, false, false));
    }
    if need_x {
        let buf = Buffer::new((!meta).then(|| std::mem::take(&mut rstd)));
        saved.push(Tensor::raw(vec![rows], buf, false, false));
        if let Some(g) = gamma {
            saved.push(g.clone());
        }
    }
    Ok(op.finish_data(shape, data, saved, 0, move |ctx| {
        let grad = ctx.grad;
        let xh = keep_xhat.then(|| ctx.saved[0].data());
        let gx = need_x.then(|| {
            let xh = xh.expect("xhat saved");
            let rs = ctx.saved[1].data();
            let gam = has_gamma.then(|| ctx.saved[2].data());
            let mut out = vec![0.0; grad.len()];
            let mut dxhat = vec![0.0; n];
            for r in 0..rows {
                let g = &grad[r * n..(r + 1) * n];
                let h = &xh[r * n..(r + 1) * n];
                for j in 0..n {
                    dxhat[j] = g[j] * gam.map_or(1.0, |gm| gm[j]);
                }
                let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    out[r * n + j] = rs[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                }
            }
            out
        });
        let gg = need_g.then(|| {
            let xh = xh.expect("xhat saved");
            let mut out = vec![0.0; n];
            for (g, h) in grad.chunks_exact(n).zip(xh.chunks_exact(n)) {
                for j in 0..n {
                    out[j] += g[j] * h[j];
                }
            }
            out
        });
        let gb = need_b.then(|| {
            let mut out = vec![0.0; n];
            for g in grad.chunks_exact(n) {
                out.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
            out
        });
        vec![gx, gg, gb]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = Tensor::from_fn(&[4, 7], |i| (i as f64 * 1.3).sin() * 30.0);
        let s = softmax(&a).unwrap();
        for row in s.data().chunks(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let a = Tensor::from_fn(&[3, 16], |i| (i as f64).powf(1.3));
        let y = layer_norm(&a, None, None, 1e-5).unwrap();
        for row in y.data().chunks(16) {
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
