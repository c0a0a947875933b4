//! Value-level operations on a frozen model.

use rand::Rng;
use sdn_autograd::{Element, Tensor};

use super::{codes_tensor, Forward, GeneratorNoise, Mode, Model, SetCode};
use crate::{Error, Result};

fn images_leaf<T: Element>(f: &mut Forward<'_, T>, images: &Tensor<T>) -> Result<sdn_autograd::Var> {
    let s = images.shape();
    let [c, h, w] = f.model().arch.image_shape();
    let ok = match s.len() {
        3 => s == [c, h, w],
        4 => s[1..] == [c, h, w],
        _ => false,
    };
    if !ok {
        return Err(Error::Invalid(format!("expected images of shape [n, {c}, {h}, {w}], got {s:?}")));
    }
    let t = if s.len() == 3 { images.clone().reshape(&[1, c, h, w])? } else { images.clone() };
    Ok(f.g.leaf(t))
}

/// Codes of consecutive groups of `n` images.
pub fn encode_sets<T: Element>(model: &Model<T>, images: &Tensor<T>, n: usize) -> Result<Vec<SetCode>> {
    if n == 0 {
        return Err(Error::Invalid("cannot encode an empty set".into()));
    }
    let mut f = Forward::frozen(model, Mode::INFERENCE)?;
    let x = images_leaf(&mut f, images)?;
    if f.g.shape(x)[0] % n != 0 {
        return Err(Error::Invalid(format!("{} images do not split into sets of {n}", f.g.shape(x)[0])));
    }
    let (_, z) = f.set_codes(x, n)?;
    let v = f.g.value(z);
    Ok((0..v.shape()[0]).map(|i| SetCode::from_signs(v.row(i))).collect())
}

/// Code of one set of images `[n, 3, S, S]`.
pub fn encode_set<T: Element>(model: &Model<T>, images: &Tensor<T>) -> Result<SetCode> {
    let n = if images.rank() == 4 { images.shape()[0] } else { 1 };
    Ok(encode_sets(model, images, n)?.remove(0))
}

/// `E(x, z) = ‖x − d(z, c(x))‖² + d0(c(x))` for one image.
pub fn image_energy<T: Element>(model: &Model<T>, x: &Tensor<T>, z: &SetCode) -> Result<f64> {
    check_code(model, z)?;
    let mut f = Forward::frozen(model, Mode::INFERENCE)?;
    let xv = images_leaf(&mut f, x)?;
    if f.g.shape(xv)[0] != 1 {
        return Err(Error::Invalid("image_energy takes a single image".into()));
    }
    let zv = f.g.leaf(codes_tensor::<T>(std::slice::from_ref(z))?);
    let c = f.image_codes(xv)?;
    let (recon, unary) = f.energy_terms(xv, zv, c)?;
    let e = f.g.add(recon, unary)?;
    Ok(f.g.value(e).item().as_f64())
}

fn check_code<T: Element>(model: &Model<T>, z: &SetCode) -> Result<()> {
    if z.len() != model.arch.d_z {
        return Err(Error::Invalid(format!("code has {} bits, model expects {}", z.len(), model.arch.d_z)));
    }
    Ok(())
}

/// `G(z_i, z′_i)` for per-image codes `[N, d_z]` and noise `[N, d_noise]`.
pub fn generate_images<T: Element>(model: &Model<T>, codes: &Tensor<T>, noise: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    let a = &model.arch;
    if codes.rank() != 2 || codes.shape()[1] != a.d_z {
        return Err(Error::Invalid(format!("codes must be [N, {}], got {:?}", a.d_z, codes.shape())));
    }
    if noise.rank() != 2 || noise.shape() != [codes.shape()[0], a.d_noise] {
        return Err(Error::Invalid(format!(
            "noise must be [{}, {}], got {:?}",
            codes.shape()[0],
            a.d_noise,
            noise.shape()
        )));
    }
    let mut f = Forward::frozen(model, mode)?;
    let z = f.g.leaf(codes.clone());
    let e = f.g.leaf(noise.clone());
    let x = f.generate(z, e)?;
    let out = f.g.value(x).clone();
    if !out.all_finite() {
        return Err(Error::NonFinite("generator output".into()));
    }
    Ok(out)
}

/// One generated set: image `i` is `G(z, noise_i)`, using running statistics.
pub fn generate_set(model: &Model<f32>, z: &SetCode, noise: &GeneratorNoise) -> Result<Tensor<f32>> {
    check_code(model, z)?;
    let n = noise.rows();
    let codes = Tensor::new(&[n, z.len()], (0..n).flat_map(|_| z.values::<f32>()).collect())?;
    generate_images(model, &codes, &noise.0, Mode::INFERENCE)
}

pub fn prior_log_probs<T: Element>(model: &Model<T>, codes: &[SetCode]) -> Result<Vec<f64>> {
    if codes.is_empty() {
        return Ok(Vec::new());
    }
    for z in codes {
        check_code(model, z)?;
    }
    let mut f = Forward::frozen(model, Mode::INFERENCE)?;
    let z = f.g.leaf(codes_tensor::<T>(codes)?);
    let lp = f.prior_log_prob(z)?;
    Ok(f.g.value(lp).data().iter().map(|v| v.as_f64()).collect())
}

pub fn prior_log_prob<T: Element>(model: &Model<T>, z: &SetCode) -> Result<f64> {
    Ok(prior_log_probs(model, std::slice::from_ref(z))?[0])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Ancestral sampling, one bit at a time in MADE order.
pub fn prior_samples<T: Element>(model: &Model<T>, count: usize, rng: &mut impl Rng) -> Result<Vec<SetCode>> {
    let d = model.arch.d_z;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut bits = vec![T::one(); count * d];
    for &i in &model.masks.order {
        let mut f = Forward::frozen(model, Mode::INFERENCE)?;
        let z = f.g.leaf(Tensor::new(&[count, d], bits.clone())?);
        let logits = f.prior_logits(z)?;
        let lv = f.g.value(logits).data();
        for r in 0..count {
            let p = sigmoid(lv[r * d + i].as_f64());
            bits[r * d + i] = if rng.random::<f64>() < p { T::one() } else { -T::one() };
        }
    }
    bits.chunks(d).map(SetCode::from_values).collect()
}

pub fn prior_sample<T: Element>(model: &Model<T>, rng: &mut impl Rng) -> Result<SetCode> {
    Ok(prior_samples(model, 1, rng)?.remove(0))
}
