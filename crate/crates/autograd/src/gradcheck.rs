//! Central finite-difference gradient checks.

use crate::{Error, Graph, Result, Tensor, Var};

/// Compares the reverse-mode gradient of `loss(param)` against central
/// differences with step `h`.
///
/// `build` receives a fresh graph and the parameter leaf and returns the
/// scalar loss. The result is the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all components.
pub fn grad_check<F>(build: F, param: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let loss = build(&mut g, x)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let x = g.leaf(param.clone());
    let loss = build(&mut g, x)?;
    let analytic = g.backward(loss, &[x])?.take(x).expect("requested gradient");
    if !analytic.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let mut worst = 0.0f64;
    for i in 0..param.len() {
        let mut plus = param.clone();
        plus.data_mut()[i] += h;
        let mut minus = param.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at component {i}")));
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
