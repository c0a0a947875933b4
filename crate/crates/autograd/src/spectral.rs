//! Power-iteration spectral normalization.

use crate::{Element, Tensor};

/// Smallest singular value estimate used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent left singular vector estimate for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState<T> {
    pub u: Vec<T>,
}

impl<T: Element> SpectralNormState<T> {
    /// Normalizes `u`; an all-zero vector becomes the uniform unit vector.
    pub fn new(mut u: Vec<T>) -> Self {
        if !normalize(&mut u) {
            let c = T::one() / T::lit(u.len() as f64).sqrt();
            u.iter_mut().for_each(|v| *v = c);
        }
        Self { u }
    }

    pub fn norm(&self) -> T {
        self.u.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Scales `v` to unit length; returns false (leaving `v` untouched) if it is zero.
fn normalize<T: Element>(v: &mut [T]) -> bool {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n <= T::zero() || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x = *x / n);
    true
}

fn mat_vec<T: Element>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum()).collect()
}

fn mat_t_vec<T: Element>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (o, &a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o = *o + a * u[r];
        }
    }
    out
}

fn floor<T: Element>(sigma: T) -> T {
    sigma.max(T::lit(SIGMA_FLOOR))
}

/// One power step: updates `u` in place, returns `(v, sigma)`.
pub(crate) fn power_step<T: Element>(w: &[T], rows: usize, cols: usize, u: &mut [T]) -> (Vec<T>, T) {
    let mut v = mat_t_vec(w, rows, cols, u);
    if !normalize(&mut v) {
        return (v, floor(T::zero()));
    }
    let mut wu = mat_vec(w, rows, cols, &v);
    if normalize(&mut wu) {
        u.copy_from_slice(&wu);
    }
    let sigma = mat_vec(w, rows, cols, &v).iter().zip(u.iter()).map(|(&a, &b)| a * b).sum();
    (v, floor(sigma))
}

/// `sigma = uᵀ W v` with `v = normalize(Wᵀ u)`, leaving `u` unchanged.
pub(crate) fn estimate<T: Element>(w: &[T], rows: usize, cols: usize, u: &[T]) -> (Vec<T>, T) {
    let mut v = mat_t_vec(w, rows, cols, u);
    if !normalize(&mut v) {
        return (v, floor(T::zero()));
    }
    let sigma = mat_vec(w, rows, cols, &v).iter().zip(u).map(|(&a, &b)| a * b).sum();
    (v, floor(sigma))
}

/// Runs `iters` power steps (at least one) and returns `weight / sigma`.
///
/// The weight is viewed as `[shape[0], rest]`.
pub fn spectral_normalize<T: Element>(
    weight: &Tensor<T>,
    state: &mut SpectralNormState<T>,
    iters: usize,
) -> (Tensor<T>, T) {
    let rows = weight.shape()[0];
    let cols = weight.len() / rows;
    let mut sigma = T::one();
    for _ in 0..iters.max(1) {
        sigma = power_step(weight.data(), rows, cols, &mut state.u).1;
    }
    let inv = T::one() / sigma;
    (weight.map(|x| x * inv), sigma)
}
