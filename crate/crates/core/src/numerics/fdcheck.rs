//! Central finite-difference verification of gradients.

use crate::error::{Result, SamiError};
use crate::numerics::autodiff::{grad_values, no_grad, Var};
use crate::numerics::tensor::Tensor;

/// Compares the autodiff gradient of `f` at `x` with central differences.
///
/// Returns `max_i |ad_i - fd_i| / max(|ad_i|, |fd_i|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(SamiError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let xv = Var::param(x.clone());
    let y = f(&xv)?;
    let fx = y.value().item()?;
    if !fx.is_finite() {
        return Err(SamiError::NonFinite(format!("f(x) = {fx}")));
    }
    let ad = grad_values(&y, &[&xv])?.remove(0);
    let fd = numeric_gradient(&f, x, eps)?;
    Ok(max_relative_error(ad.data(), fd.data()))
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Var) -> Result<Var>,
{
    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.shape(), data)?;
        let v = no_grad(|| f(&Var::constant(t)))?.value().item()?;
        if !v.is_finite() {
            return Err(SamiError::NonFinite(format!("f at perturbed point = {v}")));
        }
        Ok(v)
    };
    let base = x.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        out.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Like [`finite_difference_check`] but with the five-point central stencil
/// `(-f(x+2ε) + 8f(x+ε) - 8f(x-ε) + f(x-2ε)) / 12ε`, whose O(ε⁴) truncation
/// keeps small gradient entries above the rounding floor.
pub fn finite_difference_check_fourth_order<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(SamiError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let xv = Var::param(x.clone());
    let y = f(&xv)?;
    let ad = grad_values(&y, &[&xv])?.remove(0);
    let two = numeric_gradient(&f, x, 2.0 * eps)?;
    let one = numeric_gradient(&f, x, eps)?;
    // Richardson extrapolation of the two-point differences gives the five-point stencil.
    let fd: Vec<f64> = one.data().iter().zip(two.data()).map(|(a, b)| (4.0 * a - b) / 3.0).collect();
    Ok(max_relative_error(ad.data(), &fd))
}
