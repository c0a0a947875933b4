//! Finite-difference checks for every differentiable operator.
//!
//! Each case draws random small inputs, projects the operator output onto a
//! random direction to get a scalar loss, and runs [`grad_check`] against
//! every differentiable input. Inputs to piecewise-linear operators are kept
//! away from their kinks so central differences stay valid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{grad_check, Graph, Result, SpectralNormState, Tensor, Var};

type Case = fn(&mut ChaCha8Rng, f64) -> Result<f64>;

#[derive(Clone, Debug)]
pub struct OperatorCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Like [`random_tensor`] but with `|x| >= margin` everywhere.
pub fn random_off_kink(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    random_tensor(rng, shape).map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// `sum(y ⊙ r)` for a fixed random `r`.
pub fn project(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = random_tensor(rng, g.shape(y));
    let r = g.leaf(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Checks `f(inputs)` against each input in turn.
fn check_inputs(
    rng: &mut ChaCha8Rng,
    h: f64,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let proj_seed: u64 = rng.random();
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let err = grad_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { g.leaf(t.clone()) })
                    .collect();
                let y = f(g, &vars)?;
                project(g, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
            },
            &inputs[which],
            h,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn elementwise_binary(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let a = random_tensor(rng, &[3, 4]);
    let b = random_tensor(rng, &[3, 4]);
    check_inputs(rng, h, vec![a, b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let m = g.scale(m, 0.7);
        Ok(g.add_scalar(m, 0.3))
    })
}

fn square(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let a = random_tensor(rng, &[5]);
    check_inputs(rng, h, vec![a], |g, v| Ok(g.square(v[0])))
}

fn mul_scalar_var(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let a = random_tensor(rng, &[2, 3]);
    let s = random_tensor(rng, &[1]);
    check_inputs(rng, h, vec![a, s], |g, v| g.mul_scalar_var(v[0], v[1]))
}

fn channel_affine(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[2, 3, 2, 2]);
    let s = random_tensor(rng, &[3]);
    let b = random_tensor(rng, &[3]);
    check_inputs(rng, h, vec![x, s, b], |g, v| {
        let y = g.mul_channel(v[0], v[1])?;
        g.add_channel(y, v[2])
    })
}

fn relu(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_off_kink(rng, &[4, 3], 0.05);
    check_inputs(rng, h, vec![x], |g, v| Ok(g.relu(v[0])))
}

fn leaky_relu(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_off_kink(rng, &[4, 3], 0.05);
    check_inputs(rng, h, vec![x], |g, v| Ok(g.leaky_relu(v[0], 0.2)))
}

fn tanh(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[6]);
    check_inputs(rng, h, vec![x], |g, v| Ok(g.tanh(v[0])))
}

fn log_sigmoid(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[6]).map(|v| 3.0 * v);
    check_inputs(rng, h, vec![x], |g, v| Ok(g.log_sigmoid(v[0])))
}

fn linear(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[3, 4]);
    let w = random_tensor(rng, &[5, 4]);
    let b = random_tensor(rng, &[5]);
    check_inputs(rng, h, vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])))
}

fn bmm(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let a = random_tensor(rng, &[2, 3, 4]);
    let b = random_tensor(rng, &[2, 4, 2]);
    check_inputs(rng, h, vec![a, b], |g, v| {
        let p = g.bmm(v[0], v[1])?;
        g.transpose12(p)
    })
}

fn conv2d(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let x = random_tensor(rng, &[2, 2, 5, 5]);
    let w = random_tensor(rng, &[3, 2, 3, 3]);
    let b = random_tensor(rng, &[3]);
    check_inputs(rng, h, vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn upsample(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[1, 2, 3, 2]);
    check_inputs(rng, h, vec![x], |g, v| g.upsample_nearest(v[0], 2))
}

fn avg_pool(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[2, 2, 4, 4]);
    check_inputs(rng, h, vec![x], |g, v| g.avg_pool(v[0], 2))
}

fn batch_standardize(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[3, 2, 2, 2]);
    check_inputs(rng, h, vec![x], |g, v| Ok(g.batch_standardize(v[0], 1e-5)?.0))
}

fn standardize(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[3, 4]);
    let mean: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
    check_inputs(rng, h, vec![x], move |g, v| g.standardize(v[0], &mean, &var, 1e-5))
}

fn reshape_concat_gather(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let a = random_tensor(rng, &[2, 3]);
    let b = random_tensor(rng, &[2, 2, 1]);
    check_inputs(rng, h, vec![a, b], |g, v| {
        let b2 = g.reshape(v[1], &[2, 2])?;
        let c = g.concat(v[0], b2)?;
        g.gather_rows(c, &[1, 0, 1, 1])
    })
}

fn group_mean(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[6, 3]);
    check_inputs(rng, h, vec![x], |g, v| g.group_mean(v[0], 3))
}

fn reductions(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[3, 2, 2]);
    check_inputs(rng, h, vec![x], |g, v| {
        let r = g.sum_rows(v[0]);
        let s = g.sum(v[0]);
        let m = g.mean(v[0]);
        let t = g.add(s, m)?;
        let sq = g.square(r);
        let rs = g.sum(sq);
        g.add(t, rs)
    })
}

fn softmax(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[3, 5]);
    check_inputs(rng, h, vec![x], |g, v| Ok(g.softmax(v[0])))
}

fn softmax_log_likelihood(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let x = random_tensor(rng, &[4, 5]);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    check_inputs(rng, h, vec![x], move |g, v| g.softmax_cross_entropy(v[0], &labels))
}

fn spectral_norm(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let w = random_tensor(rng, &[3, 2, 2]);
    let u0: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
    check_inputs(rng, h, vec![w], move |g, v| {
        // Frozen u: the estimate is then a smooth function of w.
        let mut st = SpectralNormState::new(u0.clone());
        g.spectral_norm(v[0], &mut st, false)
    })
}

const CASES: &[(&str, Case)] = &[
    ("add/sub/mul/scale", elementwise_binary),
    ("square", square),
    ("mul_scalar_var", mul_scalar_var),
    ("channel affine", channel_affine),
    ("relu", relu),
    ("leaky_relu", leaky_relu),
    ("tanh", tanh),
    ("log_sigmoid", log_sigmoid),
    ("linear", linear),
    ("bmm/transpose", bmm),
    ("conv2d", conv2d),
    ("upsample_nearest", upsample),
    ("avg_pool", avg_pool),
    ("batch_standardize", batch_standardize),
    ("standardize", standardize),
    ("reshape/concat/gather", reshape_concat_gather),
    ("group_mean", group_mean),
    ("reductions", reductions),
    ("softmax", softmax),
    ("softmax_cross_entropy", softmax_log_likelihood),
    ("spectral_norm", spectral_norm),
];

/// Runs every operator case `instances` times with step `h`.
pub fn check_all_operators(instances: usize, seed: u64, h: f64) -> Result<Vec<OperatorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CASES
        .iter()
        .map(|&(name, case)| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(case(&mut rng, h)?);
            }
            Ok(OperatorCheck { name, instances, max_rel_error: worst })
        })
        .collect()
}
