//! Generator and model objectives.

use sdn_autograd::{Element, Graph, Var};

use crate::model::{Forward, SetCode};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margins {
    pub gamma0: f64,
    pub gamma1: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self { gamma0: 1.0, gamma1: 0.1 }
    }
}

impl Margins {
    pub fn new(gamma0: f64, gamma1: f64) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma1 > 0.0) {
            return Err(Error::Config(format!("margins must be positive, got gamma0={gamma0} gamma1={gamma1}")));
        }
        Ok(Self { gamma0, gamma1 })
    }
}

/// Scalar loss values by component; `total` is their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// A loss still attached to its graph.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
}

impl LossGraph {
    fn from_parts<T: Element>(g: &mut Graph<T>, parts: Vec<(&'static str, Var)>) -> Result<Self> {
        let mut total = parts[0].1;
        for &(_, v) in &parts[1..] {
            total = g.add(total, v)?;
        }
        Ok(Self { total, parts })
    }

    pub fn breakdown<T: Element>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item().as_f64(),
            components: self.parts.iter().map(|&(n, v)| (n, g.value(v).item().as_f64())).collect(),
        }
    }
}

/// `exp(-‖[a ⊙ b]_-‖₁)`, i.e. `exp(-hamming(a, b))` for binary codes.
pub fn soft_indicator(generated: &SetCode, z: &SetCode) -> Result<f64> {
    Ok((-(generated.hamming(z)? as f64)).exp())
}

/// `‖[a ⊙ z]_-‖₁` per row of `[N, d]` code matrices.
pub fn mismatch_l1<T: Element>(g: &mut Graph<T>, generated: Var, z: Var) -> Result<Var> {
    let p = g.mul(generated, z)?;
    let p = g.neg(p);
    let p = g.relu(p);
    Ok(g.sum_rows(p))
}

/// Per-set mean of mismatch plus summed energies of the generated set.
///
/// `mismatch` is `[N]`; `energies` is `[N·n]`, grouped by set.
pub fn assemble_generator_loss<T: Element>(g: &mut Graph<T>, mismatch: Var, energies: Var) -> Result<LossGraph> {
    let sets = g.shape(mismatch)[0];
    let inv = T::one() / T::lit(sets as f64);
    let code_mismatch = g.mean(mismatch);
    let e = g.sum(energies);
    let energy_gen = g.scale(e, inv);
    LossGraph::from_parts(g, vec![("code_mismatch", code_mismatch), ("energy_gen", energy_gen)])
}

/// Terms of the model objective, each averaged over sets.
///
/// `prior_logp` is `[N]`; the remaining inputs are per image.
pub fn assemble_model_loss<T: Element>(
    g: &mut Graph<T>,
    prior_logp: Var,
    recon_real: Var,
    d0_real: Var,
    recon_gen: Var,
    d0_gen: Var,
    margins: Margins,
) -> Result<LossGraph> {
    let sets = g.shape(prior_logp)[0];
    let inv = T::one() / T::lit(sets as f64);
    let (g0, g1) = (T::lit(margins.gamma0), T::lit(margins.gamma1));
    let per_set = |g: &mut Graph<T>, v: Var| {
        let s = g.sum(v);
        g.scale(s, inv)
    };
    let nll = g.neg(prior_logp);
    let prior_nll = per_set(g, nll);
    let recon_pos = per_set(g, recon_real);
    let h = g.add_scalar(d0_real, g0);
    let h = g.relu(h);
    let hinge_d0_pos = per_set(g, h);
    let h = g.neg(recon_gen);
    let h = g.add_scalar(h, g1);
    let h = g.relu(h);
    let hinge_recon_neg = per_set(g, h);
    let h = g.neg(d0_gen);
    let h = g.add_scalar(h, g0);
    let h = g.relu(h);
    let hinge_d0_neg = per_set(g, h);
    LossGraph::from_parts(
        g,
        vec![
            ("prior_nll", prior_nll),
            ("recon_pos", recon_pos),
            ("hinge_d0_pos", hinge_d0_pos),
            ("hinge_recon_neg", hinge_recon_neg),
            ("hinge_d0_neg", hinge_d0_neg),
        ],
    )
}

fn repeat_rows(sets: usize, n: usize) -> Vec<usize> {
    (0..sets).flat_map(|s| std::iter::repeat_n(s, n)).collect()
}

/// Output of the generator objective.
pub struct GeneratorPass {
    pub loss: LossGraph,
    pub images: Var,
    pub generated_codes: Var,
}

/// Generates one set per code in `z` (`[N, d_z]`, constant), re-encodes it and
/// scores it with the energy model. Only generator parameters should be
/// differentiated.
pub fn generator_loss<T: Element>(f: &mut Forward<'_, T>, z: Var, noise: Var, n: usize) -> Result<GeneratorPass> {
    let sets = f.g.shape(z)[0];
    if f.g.shape(noise)[0] != sets * n {
        return Err(Error::Invalid(format!("need {} noise rows for {sets} sets of {n}", sets * n)));
    }
    let z_img = f.g.gather_rows(z, &repeat_rows(sets, n))?;
    let images = f.generate(z_img, noise)?;
    if !f.g.value(images).all_finite() {
        return Err(Error::NonFinite("generator output".into()));
    }
    let (c, generated_codes) = f.set_codes(images, n)?;
    let mismatch = mismatch_l1(&mut f.g, generated_codes, z)?;
    let (recon, unary) = f.energy_terms(images, z_img, c)?;
    let energies = f.g.add(recon, unary)?;
    let loss = assemble_generator_loss(&mut f.g, mismatch, energies)?;
    Ok(GeneratorPass { loss, images, generated_codes })
}

/// Model objective for real sets `x` (`[N·n, ...]`) and generated sets
/// `x_gen` (`[N·n_gen, ...]`, constant) conditioned on the real codes.
pub fn model_loss<T: Element>(
    f: &mut Forward<'_, T>,
    x: Var,
    x_gen: Var,
    n: usize,
    n_gen: usize,
    margins: Margins,
) -> Result<LossGraph> {
    let (c_real, z) = f.set_codes(x, n)?;
    let sets = f.g.shape(z)[0];
    if f.g.shape(x_gen)[0] != sets * n_gen {
        return Err(Error::Invalid(format!("need {} generated images for {sets} sets of {n_gen}", sets * n_gen)));
    }
    let z_fixed = f.g.stop_gradient(z);
    let prior_logp = f.prior_log_prob(z_fixed)?;
    let z_real = f.g.gather_rows(z, &repeat_rows(sets, n))?;
    let (recon_real, d0_real) = f.energy_terms(x, z_real, c_real)?;
    let c_gen = f.image_codes(x_gen)?;
    let z_gen = f.g.gather_rows(z, &repeat_rows(sets, n_gen))?;
    let (recon_gen, d0_gen) = f.energy_terms(x_gen, z_gen, c_gen)?;
    assemble_model_loss(&mut f.g, prior_logp, recon_real, d0_real, recon_gen, d0_gen, margins)
}
