//! The four SDN networks and their parameter store.

mod code;
mod forward;
mod made;
mod ops;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sdn_autograd::{Element, SpectralNormState, Tensor};

use crate::config::TrainConfig;
use crate::{Error, Result};

pub use code::{codes_tensor, GeneratorNoise, SetCode};
pub use forward::{aggregate_codes, Forward, Mode};
pub use made::{build_made_masks, MadeMasks};
pub use ops::{
    encode_set, encode_sets, generate_images, generate_set, image_energy, prior_log_prob, prior_log_probs,
    prior_sample, prior_samples,
};

pub const CHANNELS: usize = 3;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_DECAY: f64 = 0.9;

/// Network shape, derived from a [`TrainConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub image_size: usize,
    pub d_z: usize,
    pub d_noise: usize,
    pub enc_widths: Vec<usize>,
    pub gen_widths: Vec<usize>,
    pub made_hidden: Vec<usize>,
    pub self_attention: bool,
}

impl Arch {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            image_size: c.image_size,
            d_z: c.d_z,
            d_noise: c.d_noise,
            enc_widths: c.enc_widths.clone(),
            gen_widths: c.gen_widths.clone(),
            made_hidden: c.made_hidden.clone(),
            self_attention: c.self_attention,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [CHANNELS, self.image_size, self.image_size]
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Invalid(format!("image size {} is not a multiple of 16", self.image_size)));
        }
        if self.enc_widths.len() != 4 || self.gen_widths.len() != 3 {
            return Err(Error::Invalid("need 4 encoder widths and 3 generator widths".into()));
        }
        Ok(())
    }

    /// Every parameter with its shape, fan-in for init (0 = constant) and spectral-norm flag.
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        let s = self.image_size;
        let e = &self.enc_widths;
        let gw = &self.gen_widths;
        let mut cin = CHANNELS;
        for (i, &w) in e.iter().enumerate() {
            v.push(ParamSpec::conv(&format!("enc.conv{i}"), w, cin, 4, true));
            v.push(ParamSpec::bias(&format!("enc.conv{i}.b"), w));
            if i == 1 && self.self_attention {
                attention_specs(&mut v, "enc.attn", w);
            }
            cin = w;
        }
        let flat = e[3] * (s / 16) * (s / 16);
        v.push(ParamSpec::linear("enc.head", self.d_z, flat, true));
        v.push(ParamSpec::bias("enc.head.b", self.d_z));

        let seed_len = gw[0] * (s / 8) * (s / 8);
        v.push(ParamSpec::linear("dec.fc", seed_len, 2 * self.d_z, true));
        v.push(ParamSpec::bias("dec.fc.b", seed_len));
        for (i, (ci, co)) in [(gw[0], gw[1]), (gw[1], gw[2]), (gw[2], gw[2])].into_iter().enumerate() {
            v.push(ParamSpec::conv(&format!("dec.conv{i}"), co, ci, 3, true));
            v.push(ParamSpec::bias(&format!("dec.conv{i}.b"), co));
        }
        v.push(ParamSpec::conv("dec.out", CHANNELS, gw[2], 3, true));
        v.push(ParamSpec::bias("dec.out.b", CHANNELS));

        v.push(ParamSpec::linear("unary.fc1", self.d_z, self.d_z, false));
        v.push(ParamSpec::bias("unary.fc1.b", self.d_z));
        v.push(ParamSpec::linear("unary.fc2", 1, self.d_z, false));
        v.push(ParamSpec::bias("unary.fc2.b", 1));

        let mut fan = self.d_z;
        for (l, &h) in self.made_hidden.iter().chain(std::iter::once(&self.d_z)).enumerate() {
            v.push(ParamSpec::linear(&format!("prior.fc{l}"), h, fan, false));
            v.push(ParamSpec::bias(&format!("prior.fc{l}.b"), h));
            fan = h;
        }

        v.push(ParamSpec::linear("gen.fc", seed_len, self.d_z + self.d_noise, true));
        v.push(ParamSpec::bias("gen.fc.b", seed_len));
        bn_specs(&mut v, "gen.bn_fc", gw[0]);
        for (i, (ci, co)) in [(gw[0], gw[1]), (gw[1], gw[2]), (gw[2], gw[2])].into_iter().enumerate() {
            v.push(ParamSpec::conv(&format!("gen.conv{i}"), co, ci, 3, true));
            bn_specs(&mut v, &format!("gen.bn{i}"), co);
            if i == 1 && self.self_attention {
                attention_specs(&mut v, "gen.attn", co);
            }
        }
        v.push(ParamSpec::conv("gen.out", CHANNELS, gw[2], 3, true));
        v.push(ParamSpec::bias("gen.out.b", CHANNELS));
        v
    }
}

fn attention_specs(v: &mut Vec<ParamSpec>, name: &str, c: usize) {
    let ck = (c / 8).max(1);
    v.push(ParamSpec::conv(&format!("{name}.q"), ck, c, 1, true));
    v.push(ParamSpec::conv(&format!("{name}.k"), ck, c, 1, true));
    v.push(ParamSpec::conv(&format!("{name}.v"), c, c, 1, true));
    v.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![1], fan_in: 0, fill: 0.0, sn: false });
}

fn bn_specs(v: &mut Vec<ParamSpec>, name: &str, c: usize) {
    v.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![c], fan_in: 0, fill: 1.0, sn: false });
    v.push(ParamSpec { name: format!("{name}.beta"), shape: vec![c], fan_in: 0, fill: 0.0, sn: false });
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    fill: f64,
    sn: bool,
}

impl ParamSpec {
    fn conv(name: &str, out: usize, inp: usize, k: usize, sn: bool) -> Self {
        Self { name: format!("{name}.w"), shape: vec![out, inp, k, k], fan_in: inp * k * k, fill: 0.0, sn }
    }

    fn linear(name: &str, out: usize, inp: usize, sn: bool) -> Self {
        Self { name: format!("{name}.w"), shape: vec![out, inp], fan_in: inp, fill: 0.0, sn }
    }

    fn bias(name: &str, n: usize) -> Self {
        Self { name: name.to_string(), shape: vec![n], fan_in: 0, fill: 0.0, sn: false }
    }
}

/// The two independently optimized parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Encoder, decoder, unary head and prior.
    Theta,
    /// Generator.
    Psi,
}

impl Group {
    pub fn of(name: &str) -> Self {
        if name.starts_with("gen.") {
            Group::Psi
        } else {
            Group::Theta
        }
    }

    pub fn contains(self, name: &str) -> bool {
        Group::of(name) == self
    }
}

/// Running batch statistics of one standardization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Parameters, spectral-norm vectors, running statistics and MADE masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: Arch,
    pub mask_seed: u64,
    pub masks: MadeMasks,
    pub params: BTreeMap<String, Tensor<T>>,
    pub sn: BTreeMap<String, SpectralNormState<T>>,
    pub bn: BTreeMap<String, RunningStats<T>>,
}

impl<T: Element> Model<T> {
    /// Weights from a fan-in scaled normal, biases zero, BN scales one.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let masks = build_made_masks(arch.d_z, &arch.made_hidden, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = arch.param_specs();
        let mut params = BTreeMap::new();
        let mut sn = BTreeMap::new();
        let mut bn = BTreeMap::new();
        for s in &specs {
            let t = if s.fan_in > 0 {
                let dist = Normal::new(0.0, (1.0 / s.fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&s.shape, |_| T::lit(dist.sample(&mut rng)))
            } else {
                Tensor::full(&s.shape, T::lit(s.fill))
            };
            params.insert(s.name.clone(), t);
        }
        for s in specs.iter().filter(|s| s.sn) {
            let u = (0..s.shape[0]).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect();
            sn.insert(s.name.clone(), SpectralNormState::new(u));
        }
        for s in specs.iter().filter(|s| s.name.ends_with(".gamma") && s.name.contains(".bn")) {
            let base = s.name.trim_end_matches(".gamma").to_string();
            let c = s.shape[0];
            bn.insert(base, RunningStats { mean: vec![T::zero(); c], var: vec![T::one(); c] });
        }
        Ok(Self { arch, mask_seed: seed, masks, params, sn, bn })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        Model {
            arch: self.arch.clone(),
            mask_seed: self.mask_seed,
            masks: self.masks.clone(),
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            sn: self.sn.iter().map(|(k, s)| (k.clone(), SpectralNormState { u: conv(&s.u) })).collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, s)| (k.clone(), RunningStats { mean: conv(&s.mean), var: conv(&s.var) }))
                .collect(),
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn group_names(&self, group: Group) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str).filter(move |n| group.contains(n))
    }

    pub fn num_params(&self, group: Group) -> usize {
        self.params.iter().filter(|(n, _)| group.contains(n)).map(|(_, t)| t.len()).sum()
    }
}
