//! Alternating generator / model optimization.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdn_autograd::{Adam, AdamConfig, SpectralNormState, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{Dataset, DatasetDescriptor, SetBatch, Split};
use crate::losses::{generator_loss, model_loss, LossBreakdown, Margins};
use crate::model::{generate_images, Arch, Forward, GeneratorNoise, Group, Mode, Model};
use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "iter,loss_theta,loss_psi,recon_pos,hinge_d0_pos,hinge_recon_neg,hinge_d0_neg,prior_nll,code_mismatch,code_match_rate";

/// Diagnostics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_theta: f64,
    pub loss_psi: f64,
    pub recon_pos: f64,
    pub hinge_d0_pos: f64,
    pub hinge_recon_neg: f64,
    pub hinge_d0_neg: f64,
    pub prior_nll: f64,
    pub code_mismatch: f64,
    pub code_match_rate: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.loss_theta,
            self.loss_psi,
            self.recon_pos,
            self.hinge_d0_pos,
            self.hinge_recon_neg,
            self.hinge_d0_neg,
            self.prior_nll,
            self.code_mismatch,
            self.code_match_rate
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.loss_theta,
            self.loss_psi,
            self.recon_pos,
            self.hinge_d0_pos,
            self.hinge_recon_neg,
            self.hinge_d0_neg,
            self.prior_nll,
            self.code_mismatch,
            self.code_match_rate,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// RNG for step `step`: one ChaCha stream per step, so resuming needs only the counter.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn adam_config(c: &TrainConfig, lr: f64) -> AdamConfig {
    AdamConfig { lr, beta1: c.beta1, beta2: c.beta2, ..AdamConfig::default() }
}

fn repeat_rows(t: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    let (rows, w) = (t.shape()[0], t.shape()[1]);
    let data = (0..rows).flat_map(|r| (0..n).flat_map(move |_| t.row(r).iter().copied())).collect();
    Ok(Tensor::new(&[rows * n, w], data)?)
}

fn finite(b: &LossBreakdown, what: &str) -> Result<()> {
    if b.total.is_finite() && b.components.iter().all(|(_, v)| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss {b:?}")))
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(Arch::from_config(&config), config.seed)?;
        Ok(Self {
            adam_g: Adam::new(adam_config(&config, config.lr_g)),
            adam_d: Adam::new(adam_config(&config, config.lr_d)),
            model,
            config,
            step: 0,
        })
    }

    pub fn margins(&self) -> Result<Margins> {
        Margins::new(self.config.gamma0, self.config.gamma1)
    }

    /// Samples the step's batch from the train split and runs [`Trainer::step_on`].
    pub fn train_step(&mut self, data: &Dataset) -> Result<MetricsRow> {
        let mut rng = step_rng(self.config.seed, self.step);
        let batch = data.sample_set_batch(Split::Train, self.config.batch_sets, self.config.set_size, &mut rng)?;
        self.step_on(&batch, &mut rng)
    }

    /// One generator update followed by one model update.
    pub fn step_on(&mut self, batch: &SetBatch, rng: &mut ChaCha8Rng) -> Result<MetricsRow> {
        let (psi, codes) = self.psi_step(batch, rng)?;
        let theta = self.theta_step(batch, &codes, rng)?;
        self.step += 1;
        let part = |b: &LossBreakdown, k: &str| b.get(k).unwrap_or(f64::NAN);
        let code_mismatch = part(&psi, "code_mismatch");
        Ok(MetricsRow {
            iter: self.step,
            loss_theta: theta.total,
            loss_psi: psi.total,
            recon_pos: part(&theta, "recon_pos"),
            hinge_d0_pos: part(&theta, "hinge_d0_pos"),
            hinge_recon_neg: part(&theta, "hinge_recon_neg"),
            hinge_d0_neg: part(&theta, "hinge_d0_neg"),
            prior_nll: part(&theta, "prior_nll"),
            code_mismatch,
            code_match_rate: 1.0 - code_mismatch / self.config.d_z as f64,
        })
    }

    /// Generator update. Returns the loss and the real sets' codes `[N, d_z]`.
    pub fn psi_step(&mut self, batch: &SetBatch, rng: &mut ChaCha8Rng) -> Result<(LossBreakdown, Tensor<f32>)> {
        let (sets, n) = (batch.num_sets(), batch.set_size());
        let noise = GeneratorNoise::sample(rng, sets * n, self.config.d_noise);
        let mut f = Forward::new(&mut self.model, Mode::TRAIN_PSI);
        let xv = f.g.leaf(batch.flat());
        let (_, z) = f.set_codes(xv, n)?;
        let z_fixed = f.g.stop_gradient(z);
        let nv = f.g.leaf(noise.0);
        let pass = generator_loss(&mut f, z_fixed, nv, n)?;
        let loss = pass.loss.breakdown(&f.g);
        finite(&loss, "generator")?;
        let grads = f.g.backward_params(pass.loss.total, |name| Group::Psi.contains(name))?;
        let codes = f.g.value(z).clone();
        drop(f);
        self.adam_g.step(&mut self.model.params, &grads)?;
        Ok((loss, codes))
    }

    /// Model update against one fresh generated set per real set.
    pub fn theta_step(&mut self, batch: &SetBatch, codes: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let (sets, n) = (batch.num_sets(), batch.set_size());
        let margins = self.margins()?;
        let noise = GeneratorNoise::sample(rng, sets * n, self.config.d_noise);
        let generated = generate_images(&self.model, &repeat_rows(codes, n)?, &noise.0, Mode::SAMPLE_TRAIN)?;
        let mut f = Forward::new(&mut self.model, Mode::TRAIN_THETA);
        let xv = f.g.leaf(batch.flat());
        let gv = f.g.leaf(generated);
        let loss = model_loss(&mut f, xv, gv, n, n, margins)?;
        let out = loss.breakdown(&f.g);
        finite(&out, "model")?;
        let grads = f.g.backward_params(loss.total, |name| Group::Theta.contains(name))?;
        drop(f);
        self.adam_d.step(&mut self.model.params, &grads)?;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut t = BTreeMap::new();
        for (k, v) in &self.model.params {
            t.insert(format!("param/{k}"), v.clone());
        }
        for (k, s) in &self.model.sn {
            t.insert(format!("sn/{k}"), Tensor::new(&[s.u.len()], s.u.clone()).expect("non-empty"));
        }
        for (k, s) in &self.model.bn {
            t.insert(format!("bn/{k}/mean"), Tensor::new(&[s.mean.len()], s.mean.clone()).expect("non-empty"));
            t.insert(format!("bn/{k}/var"), Tensor::new(&[s.var.len()], s.var.clone()).expect("non-empty"));
        }
        for (prefix, adam) in [("adam_g", &self.adam_g), ("adam_d", &self.adam_d)] {
            for (k, v) in &adam.m {
                t.insert(format!("{prefix}/m/{k}"), v.clone());
            }
            for (k, v) in &adam.v {
                t.insert(format!("{prefix}/v/{k}"), v.clone());
            }
        }
        Checkpoint { tensors: t, config: self.config.to_text(), seed: self.config.seed, step: self.step }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.config)?;
        if config.seed != ckpt.seed {
            return Err(Error::Checkpoint(format!("seed {} disagrees with config seed {}", ckpt.seed, config.seed)));
        }
        let mut tr = Self::new(config)?;
        tr.step = ckpt.step;
        tr.adam_g.t = ckpt.step;
        tr.adam_d.t = ckpt.step;
        let mut seen = 0;
        let shape_err = |name: &str, want: &[usize], got: &[usize]| {
            Error::Checkpoint(format!("{name}: expected shape {want:?}, found {got:?}"))
        };
        for (name, p) in tr.model.params.iter_mut() {
            let key = format!("param/{name}");
            let t = ckpt.tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
            if t.shape() != p.shape() {
                return Err(shape_err(&key, p.shape(), t.shape()));
            }
            *p = t.clone();
            seen += 1;
        }
        for (name, s) in tr.model.sn.iter_mut() {
            let key = format!("sn/{name}");
            let t = ckpt.tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
            if t.len() != s.u.len() {
                return Err(shape_err(&key, &[s.u.len()], t.shape()));
            }
            *s = SpectralNormState { u: t.data().to_vec() };
            seen += 1;
        }
        for (name, s) in tr.model.bn.iter_mut() {
            for (field, dst) in [("mean", &mut s.mean), ("var", &mut s.var)] {
                let key = format!("bn/{name}/{field}");
                let t = ckpt.tensors.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if t.len() != dst.len() {
                    return Err(shape_err(&key, &[dst.len()], t.shape()));
                }
                *dst = t.data().to_vec();
                seen += 1;
            }
        }
        for (prefix, adam) in [("adam_g", &mut tr.adam_g), ("adam_d", &mut tr.adam_d)] {
            for (moment, map) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let head = format!("{prefix}/{moment}/");
                for (k, t) in ckpt.tensors.range(head.clone()..) {
                    let Some(name) = k.strip_prefix(&head) else { break };
                    let p = tr.model.params.get(name).ok_or_else(|| Error::Checkpoint(format!("{k}: no such parameter")))?;
                    if p.shape() != t.shape() {
                        return Err(shape_err(k, p.shape(), t.shape()));
                    }
                    map.insert(name.to_string(), t.clone());
                    seen += 1;
                }
            }
        }
        if seen != ckpt.tensors.len() {
            let known: Vec<_> = ckpt
                .tensors
                .keys()
                .filter(|k| {
                    !(k.starts_with("param/") || k.starts_with("sn/") || k.starts_with("bn/") || k.starts_with("adam_"))
                })
                .collect();
            return Err(Error::Checkpoint(format!("unexpected tensors in checkpoint: {known:?}")));
        }
        Ok(tr)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Loads only the model of a checkpoint, with its config.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Model<f32>)> {
    let tr = Trainer::load(path)?;
    Ok((tr.config, tr.model))
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Every step's metrics, not only the logged ones.
    pub history: Vec<MetricsRow>,
    pub trainer: Trainer,
}

/// Runs `config.iters` steps (counting any already in `resume`), logging every
/// `log_every` steps to `out_dir/metrics.csv` and checkpointing to `out_dir`.
pub fn run_training(config: &TrainConfig, resume: Option<&Path>, data: Option<&Dataset>) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(p) => Trainer::load(p)?,
        None => Trainer::new(config.clone())?,
    };
    if resume.is_some() {
        trainer.config.iters = config.iters;
        trainer.config.out_dir = config.out_dir.clone();
    }
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = Dataset::build(&DatasetDescriptor::from_config(&trainer.config))?;
            &owned
        }
    };
    if data.train.len() < trainer.config.batch_sets {
        return Err(Error::Data(format!(
            "train split has {} identities, batches need {}",
            data.train.len(),
            trainer.config.batch_sets
        )));
    }
    let out = trainer.config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let metrics_path = out.join("metrics.csv");
    let fresh = resume.is_none() || !metrics_path.exists();
    let file = if fresh {
        File::create(&metrics_path)
    } else {
        OpenOptions::new().append(true).open(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;
    }
    let mut last_checkpoint = resume.map(Path::to_path_buf);
    let mut history = Vec::new();
    let c = trainer.config.clone();
    while trainer.step < c.iters {
        let row = match trainer.train_step(data) {
            Ok(r) if r.all_finite() => r,
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Autograd(sdn_autograd::Error::NonFinite(_))) => {
                metrics.flush().map_err(io)?;
                return Err(Error::NonFiniteLoss { step: trainer.step, last_checkpoint });
            }
            Err(e) => return Err(e),
        };
        if row.iter % c.log_every == 0 {
            writeln!(metrics, "{}", row.csv()).map_err(io)?;
            log::info!(
                "iter {} loss_psi {:.4} loss_theta {:.4} match {:.3}",
                row.iter,
                row.loss_psi,
                row.loss_theta,
                row.code_match_rate
            );
        }
        history.push(row);
        if c.checkpoint_every > 0 && trainer.step % c.checkpoint_every == 0 {
            let p = out.join(format!("ckpt_{:06}.sdn", trainer.step));
            trainer.to_checkpoint().save(&p)?;
            last_checkpoint = Some(p);
        }
    }
    metrics.flush().map_err(io)?;
    let final_checkpoint = out.join("final.sdn");
    trainer.to_checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome { final_checkpoint, history, trainer })
}
