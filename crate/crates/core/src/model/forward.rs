use std::collections::HashMap;

use sdn_autograd::{Element, Graph, Tensor, Var};

use super::{Group, Model, BN_DECAY, BN_EPS, CHANNELS, LEAKY_SLOPE};
use crate::{Error, Result};

/// How a forward pass treats spectral-norm vectors and batch standardization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Group whose spectral-norm vectors take a power step.
    pub advance: Option<Group>,
    /// Standardize with batch statistics rather than running averages.
    pub batch_stats: bool,
    pub update_running: bool,
}

impl Mode {
    pub const INFERENCE: Mode = Mode { advance: None, batch_stats: false, update_running: false };

    /// Generator update: ψ vectors advance and running statistics move.
    pub const TRAIN_PSI: Mode = Mode { advance: Some(Group::Psi), batch_stats: true, update_running: true };

    /// Encoder/discriminator/prior update.
    pub const TRAIN_THETA: Mode = Mode { advance: Some(Group::Theta), batch_stats: true, update_running: false };

    /// Sampling from the frozen generator inside a training step.
    pub const SAMPLE_TRAIN: Mode = Mode { advance: None, batch_stats: true, update_running: false };
}

enum ModelRef<'m, T> {
    Shared(&'m Model<T>),
    Exclusive(&'m mut Model<T>),
}

fn model_of<'a, T>(m: &'a ModelRef<'_, T>) -> &'a Model<T> {
    match m {
        ModelRef::Shared(m) => m,
        ModelRef::Exclusive(m) => m,
    }
}

/// One forward pass: a fresh graph over a model's parameters.
pub struct Forward<'m, T: Element> {
    pub g: Graph<T>,
    model: ModelRef<'m, T>,
    mode: Mode,
    weights: HashMap<String, Var>,
    made: Option<Vec<Var>>,
}

/// `sign(mean of consecutive groups of n code rows)` with straight-through gradient.
pub fn aggregate_codes<T: Element>(g: &mut Graph<T>, codes: Var, n: usize) -> Result<Var> {
    let m = g.group_mean(codes, n)?;
    Ok(g.sign_ste(m))
}

impl<'m, T: Element> Forward<'m, T> {
    /// A pass that may advance spectral-norm vectors and running statistics.
    pub fn new(model: &'m mut Model<T>, mode: Mode) -> Self {
        Self { g: Graph::new(), model: ModelRef::Exclusive(model), mode, weights: HashMap::new(), made: None }
    }

    /// A pass that leaves the model untouched; `mode` must not mutate state.
    pub fn frozen(model: &'m Model<T>, mode: Mode) -> Result<Self> {
        if mode.advance.is_some() || mode.update_running {
            return Err(Error::Invalid("a frozen forward pass cannot update model state".into()));
        }
        Ok(Self { g: Graph::new(), model: ModelRef::Shared(model), mode, weights: HashMap::new(), made: None })
    }

    pub fn model(&self) -> &Model<T> {
        model_of(&self.model)
    }

    fn model_mut(&mut self) -> Result<&mut Model<T>> {
        match &mut self.model {
            ModelRef::Exclusive(m) => Ok(m),
            ModelRef::Shared(_) => Err(Error::Invalid("model state is read-only in this pass".into())),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = model_of(&self.model).params.get(name).ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        Ok(self.g.param(name, t))
    }

    /// The weight as used by the network: spectrally normalized when it has a vector.
    /// Normalized once per pass, so shared layers advance their vector once.
    pub fn weight(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.weights.get(name) {
            return Ok(v);
        }
        let p = self.param(name)?;
        let advance = self.mode.advance == Some(Group::of(name));
        let v = if advance {
            let ModelRef::Exclusive(m) = &mut self.model else {
                return Err(Error::Invalid("model state is read-only in this pass".into()));
            };
            match m.sn.get_mut(name) {
                Some(state) => self.g.spectral_norm(p, state, true)?,
                None => p,
            }
        } else {
            match self.model().sn.get(name) {
                Some(state) => {
                    let mut state = state.clone();
                    self.g.spectral_norm(p, &mut state, false)?
                }
                None => p,
            }
        };
        self.weights.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = self.weight(&format!("{name}.w"))?;
        let b = if bias { Some(self.param(&format!("{name}.b"))?) } else { None };
        Ok(self.g.conv2d(x, w, b, stride, pad)?)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.weight(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        Ok(self.g.linear(x, w, Some(b))?)
    }

    fn leaky(&mut self, x: Var) -> Var {
        self.g.leaky_relu(x, T::lit(LEAKY_SLOPE))
    }

    /// Batch standardization followed by a per-channel affine map.
    fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let eps = T::lit(BN_EPS);
        let y = if self.mode.batch_stats {
            let (y, mean, var) = self.g.batch_standardize(x, eps)?;
            if self.mode.update_running {
                let stats = self.model_mut()?.bn.get_mut(name).ok_or_else(|| Error::Invalid(format!("no running stats {name}")))?;
                let (d, r) = (T::lit(BN_DECAY), T::lit(1.0 - BN_DECAY));
                for (s, &b) in stats.mean.iter_mut().zip(&mean) {
                    *s = d * *s + r * b;
                }
                for (s, &b) in stats.var.iter_mut().zip(&var) {
                    *s = d * *s + r * b;
                }
            }
            y
        } else {
            let stats = self.model().bn.get(name).ok_or_else(|| Error::Invalid(format!("no running stats {name}")))?;
            let (mean, var) = (stats.mean.clone(), stats.var.clone());
            self.g.standardize(x, &mean, &var, eps)?
        };
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let y = self.g.mul_channel(y, gamma)?;
        Ok(self.g.add_channel(y, beta)?)
    }

    /// Self-attention over spatial positions with a learned residual gate.
    pub fn attention(&mut self, x: Var, name: &str) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let q = self.conv(x, &format!("{name}.q"), 1, 0, false)?;
        let k = self.conv(x, &format!("{name}.k"), 1, 0, false)?;
        let v = self.conv(x, &format!("{name}.v"), 1, 0, false)?;
        let ck = self.g.shape(q)[1];
        let q = self.g.reshape(q, &[n, ck, hw])?;
        let k = self.g.reshape(k, &[n, ck, hw])?;
        let v = self.g.reshape(v, &[n, c, hw])?;
        let qt = self.g.transpose12(q)?;
        let scores = self.g.bmm(qt, k)?;
        let attn = self.g.softmax(scores);
        let attn_t = self.g.transpose12(attn)?;
        let o = self.g.bmm(v, attn_t)?;
        let o = self.g.reshape(o, &s)?;
        let gamma = self.param(&format!("{name}.gamma"))?;
        let o = self.g.mul_scalar_var(o, gamma)?;
        Ok(self.g.add(o, x)?)
    }

    fn check_images(&self, x: Var) -> Result<usize> {
        let s = self.g.shape(x);
        let size = self.model().arch.image_size;
        if s.len() != 4 || s[1] != CHANNELS || s[2] != size || s[3] != size {
            return Err(Error::Invalid(format!("expected images [N, {CHANNELS}, {size}, {size}], got {s:?}")));
        }
        Ok(s[0])
    }

    /// Per-image codes `c(x)`: `[N, 3, S, S] -> [N, d_z]`.
    pub fn image_codes(&mut self, x: Var) -> Result<Var> {
        let n = self.check_images(x)?;
        let mut h = x;
        for i in 0..4 {
            h = self.conv(h, &format!("enc.conv{i}"), 2, 1, true)?;
            h = self.leaky(h);
            if i == 1 && self.model().arch.self_attention {
                h = self.attention(h, "enc.attn")?;
            }
        }
        let flat = self.g.value(h).len() / n;
        let h = self.g.reshape(h, &[n, flat])?;
        self.linear(h, "enc.head")
    }

    /// Set codes for consecutive groups of `n` images: `[N·n, 3, S, S] -> ([N·n, d_z], [N, d_z])`.
    pub fn set_codes(&mut self, x: Var, n: usize) -> Result<(Var, Var)> {
        let c = self.image_codes(x)?;
        let z = aggregate_codes(&mut self.g, c, n)?;
        Ok((c, z))
    }

    fn seed_map(&mut self, x: Var, name: &str) -> Result<Var> {
        let n = self.g.shape(x)[0];
        let h = self.linear(x, name)?;
        let side = self.model().arch.image_size / 8;
        let ch = self.model().arch.gen_widths[0];
        Ok(self.g.reshape(h, &[n, ch, side, side])?)
    }

    /// Decoder `d(z, c(x))`: `[N, d_z] × [N, d_z] -> [N, 3, S, S]`.
    pub fn decode(&mut self, z: Var, c: Var) -> Result<Var> {
        let zc = self.g.concat(z, c)?;
        let mut h = self.seed_map(zc, "dec.fc")?;
        h = self.leaky(h);
        for i in 0..3 {
            h = self.g.upsample_nearest(h, 2)?;
            h = self.conv(h, &format!("dec.conv{i}"), 1, 1, true)?;
            h = self.leaky(h);
        }
        let h = self.conv(h, "dec.out", 1, 1, true)?;
        Ok(self.g.tanh(h))
    }

    /// Unary energy `d0(c)`: `[N, d_z] -> [N]`.
    pub fn unary(&mut self, c: Var) -> Result<Var> {
        let h = self.linear(c, "unary.fc1")?;
        let h = self.g.relu(h);
        let h = self.linear(h, "unary.fc2")?;
        let n = self.g.shape(h)[0];
        Ok(self.g.reshape(h, &[n])?)
    }

    /// Reconstruction error `‖x − d(z, c)‖²` per image and the unary term.
    pub fn energy_terms(&mut self, x: Var, z: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.decode(z, c)?;
        let r = self.g.sub(x, d)?;
        let r = self.g.square(r);
        let recon = self.g.sum_rows(r);
        let unary = self.unary(c)?;
        Ok((recon, unary))
    }

    /// Generator `G(z, z′)`: `[N, d_z] × [N, d_noise] -> [N, 3, S, S]`.
    pub fn generate(&mut self, z: Var, noise: Var) -> Result<Var> {
        let zn = self.g.concat(z, noise)?;
        let mut h = self.seed_map(zn, "gen.fc")?;
        h = self.batch_norm(h, "gen.bn_fc")?;
        h = self.g.relu(h);
        for i in 0..3 {
            h = self.g.upsample_nearest(h, 2)?;
            h = self.conv(h, &format!("gen.conv{i}"), 1, 1, false)?;
            h = self.batch_norm(h, &format!("gen.bn{i}"))?;
            h = self.g.relu(h);
            if i == 1 && self.model().arch.self_attention {
                h = self.attention(h, "gen.attn")?;
            }
        }
        let h = self.conv(h, "gen.out", 1, 1, true)?;
        Ok(self.g.tanh(h))
    }

    fn made_masks(&mut self) -> Result<Vec<Var>> {
        if let Some(m) = &self.made {
            return Ok(m.clone());
        }
        let masks = &self.model().masks.clone();
        let mut vars = Vec::with_capacity(masks.masks.len());
        for (m, &(o, i)) in masks.masks.iter().zip(&masks.shapes) {
            let t = Tensor::new(&[o, i], m.iter().map(|&b| T::lit(f64::from(b))).collect())?;
            vars.push(self.g.leaf(t));
        }
        self.made = Some(vars.clone());
        Ok(vars)
    }

    /// Autoregressive logits: `logit_i` depends only on bits before `i`.
    pub fn prior_logits(&mut self, z: Var) -> Result<Var> {
        let d = self.model().arch.d_z;
        let s = self.g.shape(z);
        if s.len() != 2 || s[1] != d {
            return Err(Error::Invalid(format!("prior expects codes [B, {d}], got {s:?}")));
        }
        let masks = self.made_masks()?;
        let mut h = z;
        let last = masks.len() - 1;
        for (l, &m) in masks.iter().enumerate() {
            let w = self.param(&format!("prior.fc{l}.w"))?;
            let w = self.g.mul(w, m)?;
            let b = self.param(&format!("prior.fc{l}.b"))?;
            h = self.g.linear(h, w, Some(b))?;
            if l < last {
                h = self.g.relu(h);
            }
        }
        Ok(h)
    }

    /// `log p̄(z)` per row: `Σ_i log σ(z_i · logit_i)`.
    pub fn prior_log_prob(&mut self, z: Var) -> Result<Var> {
        let logits = self.prior_logits(z)?;
        let signed = self.g.mul(z, logits)?;
        let lp = self.g.log_sigmoid(signed);
        Ok(self.g.sum_rows(lp))
    }
}
