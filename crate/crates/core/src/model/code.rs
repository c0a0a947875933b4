use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use sdn_autograd::{Element, Tensor};

use crate::{Error, Result};

/// A binary set code in `{-1, +1}^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetCode(Vec<i8>);

impl SetCode {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Invalid("empty set code".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b != 1 && b != -1) {
            return Err(Error::Invalid(format!("set code bits must be -1 or +1, got {b}")));
        }
        Ok(Self(bits))
    }

    /// Sign of each value with `sign(0) = +1`.
    pub fn from_signs<T: Element>(values: &[T]) -> Self {
        Self(values.iter().map(|&v| if v >= T::zero() { 1 } else { -1 }).collect())
    }

    /// Accepts exactly `±1` values.
    pub fn from_values<T: Element>(values: &[T]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v.as_f64() {
                x if x == 1.0 => Ok(1),
                x if x == -1.0 => Ok(-1),
                x => Err(Error::Invalid(format!("non-binary code value {x}"))),
            })
            .collect::<Result<Vec<i8>>>()?;
        Self::new(bits)
    }

    /// Code number `index` of `2^d` in binary, bit `i` set meaning `+1`.
    pub fn from_index(index: u64, d: usize) -> Self {
        Self((0..d).map(|i| if index >> i & 1 == 1 { 1 } else { -1 }).collect())
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values<T: Element>(&self) -> Vec<T> {
        self.0.iter().map(|&b| T::lit(f64::from(b))).collect()
    }

    pub fn hamming(&self, other: &SetCode) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::Invalid(format!("code lengths differ: {} vs {}", self.len(), other.len())));
        }
        Ok(self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count())
    }
}

impl fmt::Display for SetCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b > 0 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

/// Standard-normal generator noise, one row per generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNoise(pub Tensor<f32>);

impl GeneratorNoise {
    pub fn sample(rng: &mut impl Rng, rows: usize, dim: usize) -> Self {
        let t = Tensor::from_fn(&[rows.max(1), dim.max(1)], |_| rng.sample::<f32, _>(StandardNormal));
        Self(t)
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Stacks codes into a `[len, d]` tensor.
pub fn codes_tensor<T: Element>(codes: &[SetCode]) -> Result<Tensor<T>> {
    let d = codes.first().map_or(0, SetCode::len);
    if codes.iter().any(|c| c.len() != d) {
        return Err(Error::Invalid("codes of different lengths".into()));
    }
    Ok(Tensor::new(&[codes.len(), d], codes.iter().flat_map(|c| c.values::<T>()).collect())?)
}
