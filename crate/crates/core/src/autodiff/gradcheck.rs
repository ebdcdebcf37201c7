//! Central finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backward::backward;
use super::context::no_grad;
use super::tensor::Tensor;
use super::{Result, TensorError};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

/// Gradients smaller than this are compared on an absolute scale. Central
/// differences of an O(1) loss carry roughly 1e-11 of rounding noise, and
/// some gradients are exactly zero (attention key biases, for one).
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let _ng = no_grad();
    let v = f(params)?.item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite(v));
    }
    Ok(v)
}

/// Compare every element of every parameter against central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    Ok(grad_check_sampled(f, params, eps, usize::MAX, 0)?.max_relative_error)
}

/// Like [`grad_check`] but probing at most `per_tensor` randomly chosen
/// elements of each parameter.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Attr(format!("eps must be positive, got {eps}")));
    }
    let loss = f(params)?;
    let v = loss.item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite(v));
    }
    let grads = backward(&loss)?;
    drop(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let analytic = grads.get(p.id()).map(Tensor::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let elements: Vec<usize> = if per_tensor >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let base = p.to_vec();
        for &e in &elements {
            let mut plus = base.clone();
            plus[e] += eps;
            work[pi] = p.with_data(plus)?;
            let fp = eval_scalar(&f, &work)?;
            let mut minus = base.clone();
            minus[e] -= eps;
            work[pi] = p.with_data(minus)?;
            let fm = eval_scalar(&f, &work)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(analytic[e], numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((pi, e));
                report.analytic_at_worst = analytic[e];
                report.numeric_at_worst = numeric;
            }
        }
        work[pi] = p.clone();
    }
    Ok(report)
}
