use std::collections::BTreeMap;

use crate::{Element, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.0, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a named parameter map.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// Fails without touching anything if a gradient is non-finite or does not
    /// match its parameter.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for {name}")));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), &gi) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
