//! A small conv classifier whose penultimate layer serves as an image embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sdn_autograd::{Adam, AdamConfig, Graph, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::{Error, Result};

const WIDTHS: [usize; 3] = [16, 32, 64];
pub const EMBED_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Views per identity kept out of training for the accuracy check.
    pub holdout_views: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 64, lr: 3e-3, seed: 0, holdout_views: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub image_size: usize,
    pub classes: usize,
    pub params: BTreeMap<String, Tensor<f32>>,
}

impl Embedder {
    pub fn init(image_size: usize, classes: usize, seed: u64) -> Result<Self> {
        if image_size % 8 != 0 || classes < 2 {
            return Err(Error::Eval(format!("embedder needs image size divisible by 8 and 2+ classes, got {image_size}, {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut normal = |shape: &[usize], fan_in: usize| {
            let d = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| d.sample(&mut rng) as f32)
        };
        let mut cin = 3;
        for (i, &w) in WIDTHS.iter().enumerate() {
            params.insert(format!("conv{i}.w"), normal(&[w, cin, 3, 3], cin * 9));
            params.insert(format!("conv{i}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        let flat = WIDTHS[2] * (image_size / 8) * (image_size / 8);
        params.insert("fc1.w".into(), normal(&[EMBED_DIM, flat], flat));
        params.insert("fc1.b".into(), Tensor::zeros(&[EMBED_DIM]));
        params.insert("fc2.w".into(), normal(&[classes, EMBED_DIM], EMBED_DIM));
        params.insert("fc2.b".into(), Tensor::zeros(&[classes]));
        Ok(Self { image_size, classes, params })
    }

    /// Returns `(embedding, logits)`.
    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<(Var, Var)> {
        let n = g.shape(x)[0];
        let mut h = x;
        for i in 0..WIDTHS.len() {
            let w = g.param(&format!("conv{i}.w"), &self.params[&format!("conv{i}.w")]);
            let b = g.param(&format!("conv{i}.b"), &self.params[&format!("conv{i}.b")]);
            h = g.conv2d(h, w, Some(b), 1, 1)?;
            h = g.relu(h);
            h = g.avg_pool(h, 2)?;
        }
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat])?;
        let p = |g: &mut Graph<f32>, k: &str| g.param(k, &self.params[k]);
        let (w1, b1, w2, b2) = (p(g, "fc1.w"), p(g, "fc1.b"), p(g, "fc2.w"), p(g, "fc2.b"));
        let e = g.linear(h, w1, Some(b1))?;
        let e = g.relu(e);
        let logits = g.linear(e, w2, Some(b2))?;
        Ok((e, logits))
    }

    /// Embeddings `[N, EMBED_DIM]` of images `[N, 3, S, S]`, in chunks.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != [3, self.image_size, self.image_size] {
            return Err(Error::Eval(format!("embedder expects [N, 3, {0}, {0}], got {s:?}", self.image_size)));
        }
        let per = images.len() / s[0];
        let mut out = Vec::with_capacity(s[0]);
        for chunk in images.data().chunks(256 * per) {
            let n = chunk.len() / per;
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(&[n, s[1], s[2], s[3]], chunk.to_vec())?);
            let (e, _) = self.forward(&mut g, x)?;
            let v = g.value(e);
            out.extend((0..n).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone());
        let (_, logits) = self.forward(&mut g, x)?;
        let v = g.value(logits);
        Ok((0..v.shape()[0])
            .map(|i| v.row(i).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k))
            .collect())
    }

    /// Trains on the train split's leading views and reports top-1 accuracy on
    /// the held-out trailing views.
    pub fn train(data: &Dataset, cfg: &EmbedderConfig) -> Result<(Self, f64)> {
        let ids = &data.train;
        let views = data.min_views(crate::data::Split::Train);
        if ids.len() < 2 {
            return Err(Error::Eval("embedder needs at least 2 train identities".into()));
        }
        if views <= cfg.holdout_views {
            return Err(Error::Eval(format!("{views} views leave nothing to train on after {} held out", cfg.holdout_views)));
        }
        let fit_views = views - cfg.holdout_views;
        let mut model = Self::init(data.image_size, ids.len(), cfg.seed)?;
        let mut adam = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pool = ids.len() * fit_views;
        let s = data.image_size;
        for _ in 0..cfg.steps {
            let picks = index::sample(&mut rng, pool, cfg.batch.min(pool));
            let mut px = Vec::with_capacity(picks.len() * data.image_len());
            let mut labels = Vec::with_capacity(picks.len());
            for p in picks {
                let (class, v) = (p / fit_views, p % fit_views);
                px.extend_from_slice(&data.identities[ids[class]].views[v]);
                labels.push(class);
            }
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(&[labels.len(), 3, s, s], px)?);
            let (_, logits) = model.forward(&mut g, x)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let grads = g.backward_params(loss, |_| true)?;
            adam.step(&mut model.params, &grads)?;
        }
        let mut correct = 0;
        let mut total = 0;
        for (class, &id) in ids.iter().enumerate() {
            let held: Vec<f32> = data.identities[id].views[fit_views..views].iter().flatten().copied().collect();
            let t = Tensor::new(&[views - fit_views, 3, s, s], held)?;
            correct += model.predict(&t)?.iter().filter(|&&p| p == class).count();
            total += views - fit_views;
        }
        Ok((model, correct as f64 / total as f64))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.params.iter().map(|(k, v)| (format!("embedder/{k}"), v.clone())).collect();
        let config = format!("image_size = {}\nclasses = {}\n", self.image_size, self.classes);
        Checkpoint { tensors, config, seed: 0, step: 0 }.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        let field = |key: &str| -> Result<usize> {
            c.config
                .lines()
                .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("embedder file lacks {key}")))
        };
        let mut e = Self::init(field("image_size")?, field("classes")?, 0)?;
        for (k, p) in e.params.iter_mut() {
            let t = c.tensors.get(&format!("embedder/{k}")).ok_or_else(|| Error::Checkpoint(format!("missing embedder/{k}")))?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("embedder/{k} has shape {:?}", t.shape())));
            }
            *p = t.clone();
        }
        Ok(e)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
