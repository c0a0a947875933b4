//! Plain-text `key = value` training configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub d_z: usize,
    pub d_noise: usize,
    pub set_size: usize,
    pub batch_sets: usize,
    pub iters: u64,
    pub seed: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub enc_widths: Vec<usize>,
    pub gen_widths: Vec<usize>,
    pub made_hidden: Vec<usize>,
    pub self_attention: bool,
    pub data: DataSource,
    pub identities: usize,
    pub views: usize,
    pub train_fraction: f64,
    pub data_seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            d_z: 32,
            d_noise: 64,
            set_size: 8,
            batch_sets: 8,
            iters: 2000,
            seed: 0,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            gamma0: 1.0,
            gamma1: 0.1,
            enc_widths: vec![8, 16, 32, 32],
            gen_widths: vec![32, 16, 8],
            made_hidden: vec![128, 128],
            self_attention: false,
            data: DataSource::Synthetic,
            identities: 256,
            views: 24,
            train_fraction: 200.0 / 256.0,
            data_seed: 0,
            log_every: 10,
            checkpoint_every: 500,
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

const KEYS: &[&str] = &[
    "image_size",
    "d_z",
    "d_noise",
    "set_size",
    "batch_sets",
    "iters",
    "seed",
    "lr_g",
    "lr_d",
    "beta1",
    "beta2",
    "gamma0",
    "gamma1",
    "enc_widths",
    "gen_widths",
    "made_hidden",
    "self_attention",
    "data",
    "identities",
    "views",
    "train_fraction",
    "data_seed",
    "log_every",
    "checkpoint_every",
    "out_dir",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// A small configuration for tests and tiny experiments.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            d_z: 8,
            d_noise: 8,
            set_size: 4,
            batch_sets: 2,
            iters: 10,
            enc_widths: vec![4, 4, 8, 8],
            gen_widths: vec![8, 4, 4],
            made_hidden: vec![16, 16],
            identities: 16,
            views: 8,
            train_fraction: 0.75,
            log_every: 1,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = num(key, v)?,
            "d_z" => self.d_z = num(key, v)?,
            "d_noise" => self.d_noise = num(key, v)?,
            "set_size" => self.set_size = num(key, v)?,
            "batch_sets" => self.batch_sets = num(key, v)?,
            "iters" => self.iters = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "lr_g" => self.lr_g = num(key, v)?,
            "lr_d" => self.lr_d = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "gamma0" => self.gamma0 = num(key, v)?,
            "gamma1" => self.gamma1 = num(key, v)?,
            "enc_widths" => self.enc_widths = list(key, v)?,
            "gen_widths" => self.gen_widths = list(key, v)?,
            "made_hidden" => self.made_hidden = list(key, v)?,
            "self_attention" => self.self_attention = num(key, v)?,
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    _ => match v.strip_prefix("dir:") {
                        Some(p) => DataSource::Directory(PathBuf::from(p)),
                        None => return Err(Error::Config(format!("data: expected `synthetic` or `dir:<path>`, got {v:?}"))),
                    },
                }
            }
            "identities" => self.identities = num(key, v)?,
            "views" => self.views = num(key, v)?,
            "train_fraction" => self.train_fraction = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return fail(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        if self.d_z == 0 || self.d_noise == 0 {
            return fail("d_z and d_noise must be positive".into());
        }
        if self.set_size == 0 || self.batch_sets == 0 {
            return fail("set_size and batch_sets must be at least 1".into());
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if !(self.gamma0 > 0.0 && self.gamma1 > 0.0) {
            return fail(format!("margins must be positive, got gamma0={} gamma1={}", self.gamma0, self.gamma1));
        }
        if self.enc_widths.len() != 4 || self.gen_widths.len() != 3 {
            return fail("enc_widths needs 4 entries and gen_widths 3".into());
        }
        if self.enc_widths.iter().chain(&self.gen_widths).chain(&self.made_hidden).any(|&w| w == 0) {
            return fail("layer widths must be positive".into());
        }
        if self.made_hidden.is_empty() {
            return fail("made_hidden needs at least one layer".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return fail("train_fraction must lie in (0, 1]".into());
        }
        if self.views == 0 || self.identities == 0 {
            return fail("identities and views must be positive".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "image_size" => self.image_size.to_string(),
                "d_z" => self.d_z.to_string(),
                "d_noise" => self.d_noise.to_string(),
                "set_size" => self.set_size.to_string(),
                "batch_sets" => self.batch_sets.to_string(),
                "iters" => self.iters.to_string(),
                "seed" => self.seed.to_string(),
                "lr_g" => self.lr_g.to_string(),
                "lr_d" => self.lr_d.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "gamma0" => self.gamma0.to_string(),
                "gamma1" => self.gamma1.to_string(),
                "enc_widths" => join(&self.enc_widths),
                "gen_widths" => join(&self.gen_widths),
                "made_hidden" => join(&self.made_hidden),
                "self_attention" => self.self_attention.to_string(),
                "data" => match &self.data {
                    DataSource::Synthetic => "synthetic".to_string(),
                    DataSource::Directory(p) => format!("dir:{}", p.display()),
                },
                "identities" => self.identities.to_string(),
                "views" => self.views.to_string(),
                "train_fraction" => self.train_fraction.to_string(),
                "data_seed" => self.data_seed.to_string(),
                "log_every" => self.log_every.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }
}
