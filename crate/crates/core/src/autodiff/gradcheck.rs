//! Central-difference gradient checking in 64-bit precision.

use super::params::{ParamKind, ParamStore};
use crate::error::Result;

/// Denominator floor so that exact-zero gradients compare by absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// `(f(x+eps) - f(x-eps)) / 2eps` for every coordinate of `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe)?;
        probe[i] = x[i] - eps;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compare analytic and central-difference gradients of a scalar function.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let numeric = numeric_gradient(f, x, eps)?;
    Ok(max_relative_error(analytic, &numeric))
}

/// Per-parameter outcome of [`grad_check_store`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Check every trainable parameter of `store`.
///
/// `loss` must run a forward pass, call backward into the store it is given
/// and return the loss value. Gradients already in `store` are cleared first.
pub fn grad_check_store<F>(store: &ParamStore<f64>, eps: f64, mut loss: F) -> Result<Vec<ParamCheck>>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<f64>,
{
    let mut base = store.clone();
    base.zero_grad();
    loss(&mut base)?;
    let mut report = Vec::new();
    for (id, p) in base.iter() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let analytic = p.grad.to_f64_vec();
        let x = p.value.to_f64_vec();
        let numeric = numeric_gradient(
            |probe| {
                let mut s = base.clone();
                s.get_mut(id).value.data_mut().copy_from_slice(probe);
                loss(&mut s)
            },
            &x,
            eps,
        )?;
        report.push(ParamCheck {
            name: p.name.clone(),
            max_rel_err: max_relative_error(&analytic, &numeric),
        });
    }
    Ok(report)
}
