use super::real::Real;
use super::tensor::{backward, no_grad, Tensor};
use crate::error::Result;

/// Denominator floor of the element-wise relative error.
const REL_FLOOR: f64 = 1e-8;

/// Worst element of an analytic/numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

fn analytic_gradient<T, F>(f: &F, params: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let leaves: Vec<Tensor<T>> = params.iter().map(Tensor::to_parameter).collect();
    let loss = f(&leaves)?;
    backward(&loss)?;
    Ok(leaves
        .iter()
        .map(|p| match p.grad() {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect())
}

/// Central differences `(f(x + eps) - f(x - eps)) / (2 eps)` per element.
pub fn numeric_gradient<T, F>(f: &F, params: &[Tensor<T>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    no_grad(|| {
        let mut out = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let mut grad = Vec::with_capacity(p.numel());
            for j in 0..p.numel() {
                let eval = |delta: f64| -> Result<(T, T)> {
                    let mut shifted: Vec<Tensor<T>> = params.to_vec();
                    let mut data = p.to_vec();
                    data[j] += T::lit(delta);
                    let x = data[j];
                    shifted[i] = Tensor::new(data, p.shape())?;
                    Ok((x, f(&shifted)?.item()))
                };
                // difference in T, over the step actually taken
                let ((x_hi, f_hi), (x_lo, f_lo)) = (eval(eps)?, eval(-eps)?);
                grad.push(((f_hi - f_lo) / (x_hi - x_lo)).as_f64());
            }
            out.push(grad);
        }
        Ok(out)
    })
}

/// Element-wise `|a - n| / max(|a|, |n|, 1e-8)`, maximized.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&a, &n)) in a.iter().zip(n).enumerate() {
            report.elements += 1;
            let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            if err > report.max_rel_error || err.is_nan() {
                report = GradCheckReport {
                    max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
                    param: p,
                    index: j,
                    analytic: a,
                    numeric: n,
                    elements: report.elements,
                };
            }
        }
    }
    report
}

/// Compare the backward pass of `f` at `params` to central differences of
/// the same `f` in the same precision.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let a = analytic_gradient(&f, params)?;
    let n = numeric_gradient(&f, params, eps)?;
    Ok(compare_gradients(&a, &n))
}

/// Like [`grad_check`], but the finite differences come from `oracle`, a
/// (typically higher precision) evaluation of the same function. Used to
/// judge a 32-bit backward pass without 32-bit rounding noise in the
/// reference.
pub fn grad_check_against<T, U, F, G>(
    f: F,
    oracle: G,
    params: &[Tensor<T>],
    eps: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    U: Real,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
    G: Fn(&[Tensor<U>]) -> Result<Tensor<U>>,
{
    let a = analytic_gradient(&f, params)?;
    let lifted: Vec<Tensor<U>> = params.iter().map(|p| p.cast::<U>()).collect();
    let n = numeric_gradient(&oracle, &lifted, eps)?;
    Ok(compare_gradients(&a, &n))
}
