use super::tensor::Tensor;
use super::value::Value;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest coordinate error, each scaled by
/// `max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Value) -> Result<Value>,
{
    grad_check_split(&f, &f, x, eps)
}

/// Like [`grad_check`], but the reverse-mode gradient comes from `graph`
/// and the central differences from `reference`. Used where `graph`
/// contains stop-gradients: `reference` evaluates the same function with
/// the detached quantities frozen at `x`.
pub fn grad_check_split<F, G>(graph: F, reference: G, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Value) -> Result<Value>,
    G: Fn(&Value) -> Result<Value>,
{
    let leaf = Value::param(x.clone());
    let out = graph(&leaf)?;
    if out.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: function output has shape {:?}, expected a scalar",
            out.shape()
        )));
    }
    out.backward()?;
    let analytic = leaf.grad_or_zeros();

    let eval = |probe: Tensor| -> Result<f64> { Ok(reference(&Value::constant(probe))?.item()) };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err.is_nan() {
            return Err(Error::numeric("grad_check", format!("NaN at coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
