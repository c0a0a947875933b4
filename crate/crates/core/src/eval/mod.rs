//! Consistency, set-size, verification-ROC and prior-normalization checks.

pub mod embedder;
pub mod report;
pub mod roc;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdn_autograd::Tensor;

use crate::data::SetBatch;
use crate::model::{
    codes_tensor, encode_sets, generate_images, prior_log_probs, prior_samples, GeneratorNoise, Mode, Model, SetCode,
};
use crate::{Error, Result};
pub use embedder::{cosine, Embedder, EmbedderConfig};
pub use roc::{auc_pair_count, roc_curve, RocCurve};

/// Images generated from each code, `n_gen` per code, grouped by code.
pub fn generate_sets(model: &Model<f32>, codes: &[SetCode], n_gen: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if codes.is_empty() || n_gen == 0 {
        return Err(Error::Eval("need at least one code and one image per set".into()));
    }
    let per_image: Vec<SetCode> = codes.iter().flat_map(|c| std::iter::repeat_n(c.clone(), n_gen)).collect();
    let noise = GeneratorNoise::sample(rng, per_image.len(), model.arch.d_noise);
    let mut out = Vec::with_capacity(per_image.len() * model.arch.image_len());
    // Chunked to bound memory; inference standardization makes rows independent.
    let chunk = 256usize.div_ceil(n_gen) * n_gen;
    for (codes, noise) in per_image.chunks(chunk).zip(noise.0.data().chunks(chunk * model.arch.d_noise)) {
        let z = codes_tensor::<f32>(codes)?;
        let e = Tensor::new(&[codes.len(), model.arch.d_noise], noise.to_vec())?;
        out.extend_from_slice(generate_images(model, &z, &e, Mode::INFERENCE)?.data());
    }
    let [c, h, w] = model.arch.image_shape();
    Ok(Tensor::new(&[per_image.len(), c, h, w], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatch {
    pub per_set: Vec<f64>,
    pub mean: f64,
}

/// Fraction of bits of each re-encoded generated set that agree with the code
/// it was generated from.
pub fn code_match_rate(model: &Model<f32>, sets: &SetBatch, n_gen: usize, rng: &mut impl Rng) -> Result<CodeMatch> {
    let codes = encode_sets(model, &sets.flat(), sets.set_size())?;
    let gen = generate_sets(model, &codes, n_gen, rng)?;
    let again = encode_sets(model, &gen, n_gen)?;
    let d = model.arch.d_z as f64;
    let per_set = codes
        .iter()
        .zip(&again)
        .map(|(a, b)| Ok(1.0 - a.hamming(b)? as f64 / d))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_set.iter().sum::<f64>() / per_set.len() as f64;
    Ok(CodeMatch { per_set, mean })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetSizePoint {
    pub k: usize,
    pub mean_hamming: f64,
    /// Mean bit agreement between the full-set code and the re-encoded set
    /// generated from the `k`-view code.
    pub mean_consistency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetSizeCurve {
    pub points: Vec<SetSizePoint>,
}

/// Encodes each set from its first `k` views and compares with the code of
/// all views.
pub fn set_size_consistency(
    model: &Model<f32>,
    sets: &SetBatch,
    ks: &[usize],
    n_gen: usize,
    seed: u64,
) -> Result<SetSizeCurve> {
    let n = sets.set_size();
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::Eval(format!("k values must be positive and strictly increasing, got {ks:?}")));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > n) {
        return Err(Error::Eval(format!("k = {k} exceeds the set size {n}")));
    }
    let full = encode_sets(model, &sets.flat(), n)?;
    let s = sets.images.shape();
    let per = s[2] * s[3] * s[4];
    let d = model.arch.d_z as f64;
    let mut points = Vec::new();
    for &k in ks {
        let mut data = Vec::with_capacity(s[0] * k * per);
        for i in 0..s[0] {
            data.extend_from_slice(&sets.images.row(i)[..k * per]);
        }
        let sub = Tensor::new(&[s[0] * k, s[2], s[3], s[4]], data)?;
        let codes = encode_sets(model, &sub, k)?;
        let dist: Vec<usize> = full.iter().zip(&codes).map(|(a, b)| a.hamming(b)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = generate_sets(model, &codes, n_gen, &mut rng)?;
        let again = encode_sets(model, &gen, n_gen)?;
        let agree: Vec<f64> =
            full.iter().zip(&again).map(|(a, b)| Ok(1.0 - a.hamming(b)? as f64 / d)).collect::<Result<_>>()?;
        points.push(SetSizePoint {
            k,
            mean_hamming: dist.iter().sum::<usize>() as f64 / dist.len() as f64,
            mean_consistency: agree.iter().sum::<f64>() / agree.len() as f64,
        });
    }
    Ok(SetSizeCurve { points })
}

/// Images labelled by the set they belong to.
#[derive(Clone, Debug)]
pub struct LabelledImages {
    pub embeddings: Vec<Vec<f32>>,
    pub set_of: Vec<usize>,
}

impl LabelledImages {
    pub fn new(embedder: &Embedder, images: &Tensor<f32>, set_size: usize) -> Result<Self> {
        let embeddings = embedder.embed(images)?;
        let set_of = (0..embeddings.len()).map(|i| i / set_size).collect();
        Ok(Self { embeddings, set_of })
    }

    fn sets(&self) -> usize {
        self.set_of.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// Same/different cosine scores. Within one collection, every within-set pair
/// is a positive; across two collections, every same-set pair is. Negatives are
/// an equal number of random different-set pairs.
pub fn pair_scores(a: &LabelledImages, b: Option<&LabelledImages>, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let other = b.unwrap_or(a);
    if a.sets().max(other.sets()) < 2 {
        return Err(Error::Eval("ROC needs at least 2 identities".into()));
    }
    let mut same = Vec::new();
    for i in 0..a.embeddings.len() {
        let start = if b.is_some() { 0 } else { i + 1 };
        for j in start..other.embeddings.len() {
            if a.set_of[i] == other.set_of[j] {
                same.push(cosine(&a.embeddings[i], &other.embeddings[j]));
            }
        }
    }
    let mut diff = Vec::with_capacity(same.len());
    let mut guard = 0usize;
    while diff.len() < same.len() {
        let i = rng.random_range(0..a.embeddings.len());
        let j = rng.random_range(0..other.embeddings.len());
        if a.set_of[i] != other.set_of[j] {
            diff.push(cosine(&a.embeddings[i], &other.embeddings[j]));
        }
        guard += 1;
        if guard > 1000 * (same.len() + 1) {
            return Err(Error::Eval("could not draw different-set pairs".into()));
        }
    }
    Ok((same, diff))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocSuiteConfig {
    pub n_gen: usize,
    pub free_sets: usize,
    pub seed: u64,
    pub label_noise: Vec<f64>,
}

impl Default for RocSuiteConfig {
    fn default() -> Self {
        Self { n_gen: 8, free_sets: 56, seed: 0, label_noise: Vec::new() }
    }
}

/// Replaces `round(rho·n)` images of every set with images of other sets.
pub fn contaminate(sets: &SetBatch, rho: f64, rng: &mut impl Rng) -> Result<SetBatch> {
    let s = sets.images.shape().to_vec();
    let (count, n) = (s[0], s[1]);
    if count < 2 {
        return Err(Error::Eval("contamination needs at least 2 sets".into()));
    }
    let swap = ((rho * n as f64).round() as usize).min(n);
    let per = s[2] * s[3] * s[4];
    let mut data = sets.images.data().to_vec();
    for i in 0..count {
        for slot in index::sample(rng, n, swap) {
            let mut donor = rng.random_range(0..count - 1);
            if donor >= i {
                donor += 1;
            }
            let v = rng.random_range(0..n);
            let src = (donor * n + v) * per;
            let dst = (i * n + slot) * per;
            // Donors come from the original batch, never from already swapped slots.
            data[dst..dst + per].copy_from_slice(&sets.images.data()[src..src + per]);
        }
    }
    SetBatch::new(Tensor::new(&s, data)?, sets.identity_ids.clone())
}

/// ROC per condition: real, recon, recon_real, free, uniform, and `real_rho=…`
/// for each label-noise level.
pub fn roc_suite(
    model: &Model<f32>,
    embedder: &Embedder,
    sets: &SetBatch,
    cfg: &RocSuiteConfig,
) -> Result<BTreeMap<String, RocCurve>> {
    let n = sets.set_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = BTreeMap::new();
    let real = LabelledImages::new(embedder, &sets.flat(), n)?;
    let (p, q) = pair_scores(&real, None, &mut rng)?;
    out.insert("real".to_string(), roc_curve(&p, &q)?);

    let codes = encode_sets(model, &sets.flat(), n)?;
    let recon = LabelledImages::new(embedder, &generate_sets(model, &codes, cfg.n_gen, &mut rng)?, cfg.n_gen)?;
    let (p, q) = pair_scores(&recon, None, &mut rng)?;
    out.insert("recon".to_string(), roc_curve(&p, &q)?);
    let (p, q) = pair_scores(&recon, Some(&real), &mut rng)?;
    out.insert("recon_real".to_string(), roc_curve(&p, &q)?);

    let free_codes = prior_samples(model, cfg.free_sets, &mut rng)?;
    let free = LabelledImages::new(embedder, &generate_sets(model, &free_codes, cfg.n_gen, &mut rng)?, cfg.n_gen)?;
    let (p, q) = pair_scores(&free, None, &mut rng)?;
    out.insert("free".to_string(), roc_curve(&p, &q)?);

    let d = model.arch.d_z;
    let uniform_codes: Vec<SetCode> = (0..cfg.free_sets)
        .map(|_| SetCode::new((0..d).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()))
        .collect::<Result<_>>()?;
    let uniform = LabelledImages::new(embedder, &generate_sets(model, &uniform_codes, cfg.n_gen, &mut rng)?, cfg.n_gen)?;
    let (p, q) = pair_scores(&uniform, None, &mut rng)?;
    out.insert("uniform".to_string(), roc_curve(&p, &q)?);

    for &rho in &cfg.label_noise {
        let noisy = contaminate(sets, rho, &mut rng)?;
        let imgs = LabelledImages::new(embedder, &noisy.flat(), n)?;
        let (p, q) = pair_scores(&imgs, None, &mut rng)?;
        out.insert(format!("real_rho={rho}"), roc_curve(&p, &q)?);
    }
    Ok(out)
}

pub const MAX_ENUMERATION_BITS: usize = 12;

/// `log p̄(z)` for every code `z` of `2^d_z`, in [`SetCode::from_index`] order.
pub fn enumerate_prior(model: &Model<f64>) -> Result<Vec<f64>> {
    let d = model.arch.d_z;
    if d > MAX_ENUMERATION_BITS {
        return Err(Error::Eval(format!("refusing to enumerate 2^{d} codes; d_z must be at most {MAX_ENUMERATION_BITS}")));
    }
    let total = 1u64 << d;
    let mut out = Vec::with_capacity(total as usize);
    let mut start = 0;
    while start < total {
        let end = (start + 1024).min(total);
        let codes: Vec<SetCode> = (start..end).map(|i| SetCode::from_index(i, d)).collect();
        out.extend(prior_log_probs(model, &codes)?);
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportEntry {
    pub code: SetCode,
    pub count: usize,
    pub p_bar: f64,
    pub p_renorm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorReport {
    pub d_z: usize,
    pub total_mass: f64,
    pub support_mass: f64,
    pub support: Vec<SupportEntry>,
}

impl PriorReport {
    pub fn normalized(&self, tol: f64) -> bool {
        (self.total_mass - 1.0).abs() <= tol
    }

    /// Renormalizing over the observed support never lowers a code's probability.
    pub fn renormalization_dominates(&self) -> bool {
        self.support.iter().all(|e| e.p_renorm >= e.p_bar)
    }
}

/// Sums the prior over all codes in f64 and renormalizes it over the codes of
/// the given sets.
pub fn prior_brute_force_check(model: &Model<f32>, sets: Option<&SetBatch>) -> Result<PriorReport> {
    let d = model.arch.d_z;
    let lp = enumerate_prior(&model.cast::<f64>())?;
    let total_mass: f64 = lp.iter().map(|v| v.exp()).sum();
    let mut counts: BTreeMap<SetCode, usize> = BTreeMap::new();
    if let Some(s) = sets {
        for c in encode_sets(model, &s.flat(), s.set_size())? {
            *counts.entry(c).or_default() += 1;
        }
    }
    let index_of = |c: &SetCode| c.bits().iter().enumerate().fold(0usize, |acc, (i, &b)| acc | (usize::from(b > 0) << i));
    let support_mass: f64 = counts.keys().map(|c| lp[index_of(c)].exp()).sum();
    let support = counts
        .into_iter()
        .map(|(code, count)| {
            let p_bar = lp[index_of(&code)].exp();
            SupportEntry { p_renorm: p_bar / support_mass, p_bar, code, count }
        })
        .collect();
    Ok(PriorReport { d_z: d, total_mass, support_mass, support })
}
